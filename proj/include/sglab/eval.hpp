#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sglab/model.hpp"
#include "sglab/sps.hpp"
#include "sglab/synth.hpp"

namespace sglab::eval {

class DegenerateLabelsError : public std::runtime_error {
  public:
    DegenerateLabelsError() : std::runtime_error("degenerate labels") {}
};

class StatsError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// 1 when `content` (eos and pad already stripped) equals a valid answer.
int judge_correct(const model::TokenSeq& content, std::span<const model::TokenSeq> answers);

/// Average ranks, 1-based, ties sharing the mean of their positions.
std::vector<double> midranks(std::span<const double> xs);

/// P(u_correct < u_incorrect) + P(tie) / 2 by rank sums. correct[i] is 0/1.
double auroc(std::span<const double> uncertainty, std::span<const int> correct);

struct RiskCoverage {
    double aurc = 0.0;
    std::vector<std::pair<double, double>> points;  // (coverage k/n, risk_k)
};

/// Ascending uncertainty, ties broken by ascending id (index order when ids
/// are omitted); AURC is the mean risk over all n prefixes.
RiskCoverage aurc(std::span<const double> uncertainty, std::span<const int> correct,
                  std::span<const std::uint64_t> ids = {});

double spearman(std::span<const double> xs, std::span<const double> ys);

struct EvalRecord {
    std::uint64_t id = 0;
    int correct = 0;
    double omega_bar = 0.0;
    bool held_out = false;
    bool multi_answer = false;
    std::vector<double> scores;  // one per ScoreTable::methods
};

struct ScoreTable {
    std::vector<std::string> methods;
    std::vector<EvalRecord> records;

    std::vector<double> column(std::size_t method) const;
    std::size_t method_index(const std::string& name) const;
};

/// CSV: record_id,correct,omega_bar,<methods...>
void write_scores_csv(const ScoreTable& table, const std::filesystem::path& path);
ScoreTable read_scores_csv(const std::filesystem::path& path);

/// Copies held_out / multi_answer flags from the dataset by record id.
void attach_split_flags(ScoreTable& table, const synth::Dataset& dataset);

inline constexpr const char* kSplitNames[] = {"all", "single_answer", "multi_answer", "held_out"};

struct MethodSummary {
    double auroc = 0.0;
    double aurc = 0.0;
};

struct EvalReport {
    std::size_t n = 0;
    std::size_t excluded = 0;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, MethodSummary>> methods;
    // split -> method -> AUROC, nullopt when the split has one class only
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::optional<double>>>>> splits;
    std::optional<double> sps_auroc_spearman;
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::map<std::string, std::vector<std::pair<double, double>>> risk_coverage;

    const MethodSummary& method(const std::string& name) const;
    std::optional<double> split_auroc(const std::string& split, const std::string& name) const;
};

/// Grid cells (l, t) with a semgrad_l<l>_t<t> column give the pairs
/// (SPS(l, t), AUROC of that column); nullopt when fewer than 3 cells or a
/// rank variance is zero.
std::optional<double> sps_auroc_correlation(const ScoreTable& table, const sps::SpsTable& sps);

/// Throws DegenerateLabelsError when all records share one label. Splits
/// other than "all" are only meaningful when flags were attached.
EvalReport build_report(const ScoreTable& table, const sps::SpsTable* sps, std::size_t excluded,
                        std::uint64_t seed, nlohmann::ordered_json config = nlohmann::ordered_json::object());

nlohmann::ordered_json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::ordered_json& j);

/// Writes the report JSON and a method,coverage,risk CSV.
void emit_report(const EvalReport& report, const std::filesystem::path& json_path,
                 const std::filesystem::path& csv_path);
EvalReport read_report(const std::filesystem::path& json_path);

}  // namespace sglab::eval
