#pragma once

// Command-line front end. Every command is a function of its inputs and one
// master seed; stage seeds are derived with mix_seed(master, stage).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sglab/model.hpp"
#include "sglab/synth.hpp"
#include "sglab/train.hpp"
#include "sglab/uq.hpp"

namespace sglab::cli {

enum ExitCode : int { kOk = 0, kValidation = 2, kNumerical = 3, kDegenerate = 4 };

class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Stream ids for mix_seed(master, stream).
enum class Stage : std::uint64_t { corpus = 1, init = 2, train = 3, score = 4 };
std::uint64_t stage_seed(std::uint64_t master, Stage stage);

struct RunConfig {
    synth::CorpusSpec corpus;
    model::TransformerConfig model;
    train::TrainConfig train;
    uq::UqConfig uq;
    std::size_t max_offset = 0;  // SPS offsets; 0 means min(8, shortest query)
    std::size_t threads = 1;
    std::uint64_t seed = 0;

    RunConfig();
    /// Copies of the component configs with stage seeds applied.
    synth::CorpusSpec corpus_spec() const;
    model::TransformerConfig model_config() const;
    train::TrainConfig train_config() const;
    uq::UqConfig uq_config() const;
};

/// Sets one field by its config-file name. Throws ConfigError on an unknown
/// key or a malformed value.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

/// Flat "key = value" lines; '#' starts a comment.
void apply_config_text(RunConfig& config, const std::string& text);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// Every key with its current value, in documented order.
std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& config);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Disables glibc heap trimming, which otherwise returns and re-faults pages
/// on every training step.
void tune_allocator();

/// Parses argv and runs one subcommand. Returns an ExitCode.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Artifact names written by the pipeline, in manifest order.
inline constexpr const char* kPrimaryArtifacts[] = {"dataset.jsonl", "model.ckpt",  "sps.csv",
                                                    "selection.json", "scores.csv", "report.json"};
inline constexpr const char* kAuxiliaryArtifacts[] = {"loss.csv", "risk_coverage.csv"};

}  // namespace sglab::cli
