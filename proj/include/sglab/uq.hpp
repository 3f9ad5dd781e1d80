#pragma once

// Uncertainty scores for one generation. Every score is oriented so that a
// larger value means more uncertain.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sglab/diffcore.hpp"
#include "sglab/model.hpp"
#include "sglab/synth.hpp"

namespace sglab::uq {

class UqConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a generation has no content tokens (immediate eos).
class EmptyResponseError : public std::runtime_error {
  public:
    EmptyResponseError() : std::runtime_error("empty response") {}
};

enum class GradNorm { l1, l2 };

/// Known method names, in canonical order. "semgrad_grid" expands to one
/// column semgrad_l<l>_t<t> per layer 1..L-1 and offset 1..grid_max_offset.
inline constexpr const char* kMethodNames[] = {"semgrad", "paragrad",         "hybridgrad",      "exgrad",
                                               "gnll",    "ln_pe",            "pe",              "self_consistency",
                                               "semantic_entropy", "semgrad_grid"};

struct UqConfig {
    std::size_t t_star = 1;
    std::vector<std::size_t> band;
    double tau = 1.0;
    double beta = 1.0;
    std::size_t mc_samples = 10;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::vector<std::string> methods = {"semgrad", "paragrad", "hybridgrad", "gnll"};
    GradNorm norm = GradNorm::l1;
    bool entropy_weights = true;  // false replaces every omega_t by 1 (ablation)
    std::size_t max_new = 4;
    std::size_t grid_max_offset = 0;  // 0: use t_star

    void validate() const;
};

/// Score column names for `config.methods` with the grid expanded.
std::vector<std::string> score_columns(const UqConfig& config, std::size_t n_layers);

/// Teacher-forced graph over [prompt; response] whose output rows are the
/// distributions that predict each response token.
struct ScoringTrace {
    model::ForwardTrace trace;
    std::size_t prompt_len = 0;
    model::TokenSeq response;
};

ScoringTrace teacher_forced(const model::ModelState& model, const model::GenerationRecord& record);

/// sum_t w_t log p(response_t), where row first_row + t of trace.probs
/// predicts response_t. Without explicit weights, w_t is the detached
/// entropy of that row.
diffcore::NodeId weighted_loglik_node(model::ForwardTrace& trace, std::size_t first_row,
                                      std::span<const model::Token> response,
                                      std::optional<std::span<const double>> weights = std::nullopt);

/// Norm of a gradient slice scaled by its length: mean |g| for l1,
/// ||g||_2 / sqrt(n) for l2.
double normalized_norm(std::span<const double> grad, GradNorm norm);

double semgrad(const model::ModelState& model, const model::GenerationRecord& record, const UqConfig& config);
double paragrad(const model::ModelState& model, const model::GenerationRecord& record, const UqConfig& config);
/// Unweighted LM-head gradient, from the closed form
/// sum_t (e_{y_t} - p_t) x_t^T with x_t the normalized final hidden row.
double exgrad(const model::ModelState& model, const model::GenerationRecord& record);

/// (1 - a) s_sem + beta a s_para with a = exp(-omega_bar / tau).
double hybridgrad(double s_sem, double s_para, double omega_bar, double tau, double beta);

double gnll(const model::GenerationRecord& record);

/// Sampled generations for one prompt, drawn from one seeded stream.
std::vector<model::GenerationRecord> draw_samples(const model::ModelState& model, std::span<const model::Token> prompt,
                                                  const UqConfig& config, std::uint64_t stream_seed);

struct SampleEntropy {
    double ln_pe = 0.0;
    double pe = 0.0;
    std::size_t excluded = 0;  // samples without content
};

/// Length-normalized and raw predictive entropy over samples with content.
SampleEntropy predictive_entropy(std::span<const model::GenerationRecord> samples);
double ln_pe(const model::ModelState& model, std::span<const model::Token> prompt, const UqConfig& config,
             std::uint64_t stream_seed);

/// 1 - fraction of samples whose content equals the greedy content.
double self_consistency(std::span<const model::GenerationRecord> samples, const model::GenerationRecord& greedy);
/// Entropy of exact-match clusters of sample contents.
double semantic_entropy(std::span<const model::GenerationRecord> samples);

using UqScores = std::vector<std::pair<std::string, double>>;

struct ScoredRecord {
    std::uint64_t record_id = 0;
    model::GenerationRecord generation;
    UqScores scores;
    std::uint64_t backward_calls = 0;
    std::size_t excluded_samples = 0;

    double score(const std::string& method) const;
};

/// Per-record sampling stream: mix_seed(config.seed, record_id).
std::uint64_t record_stream_seed(const UqConfig& config, std::uint64_t record_id);

/// Greedy decode of the item's query, then every requested score. All
/// gradient scores share one teacher-forced graph and one backward.
/// Throws EmptyResponseError when the greedy response has no content.
ScoredRecord score_record(const model::ModelState& model, const synth::QaItem& item, const UqConfig& config);

struct BatchResult {
    std::vector<ScoredRecord> records;          // dataset order, empty responses dropped
    std::vector<std::uint64_t> excluded_ids;    // empty greedy responses
};

/// score_record over every item, fanned out over `threads` workers.
/// Output is identical for any thread count.
BatchResult score_dataset(const model::ModelState& model, const synth::Dataset& dataset, const UqConfig& config,
                          std::size_t threads = 1);

}  // namespace sglab::uq
