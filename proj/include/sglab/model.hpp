#pragma once

// Miniature decoder-only transformer: pre-RMS-norm blocks, learned absolute
// positions, untied LM head, full residual-stream tracing.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sglab/diffcore.hpp"

namespace sglab::model {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

inline constexpr Token kPad = 0;
inline constexpr Token kEos = 1;
inline constexpr Token kSep = 2;

class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class InputError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

struct TransformerConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t d_ff = 128;
    std::size_t vocab_size = 256;
    std::size_t max_seq_len = 16;
    std::uint64_t init_seed = 0;

    std::size_t head_dim() const { return d_model / n_heads; }
    void validate() const;
    bool operator==(const TransformerConfig&) const = default;
};

struct Tensor {
    diffcore::Shape shape;
    std::vector<double> data;

    static Tensor zeros(diffcore::Shape shape);
    bool operator==(const Tensor&) const = default;
};

struct LayerWeights {
    Tensor wq, wk, wv, wo;  // [d_model x d_model], rows are outputs
    Tensor w1;              // [d_ff x d_model]
    Tensor w2;              // [d_model x d_ff]
    Tensor attn_gain, ffn_gain;

    bool operator==(const LayerWeights&) const = default;
};

struct ModelState {
    TransformerConfig config;
    Tensor embedding;   // [V x d]
    Tensor positional;  // [max_seq_len x d]
    std::vector<LayerWeights> layers;
    Tensor final_gain;  // [d]
    Tensor lm_head;     // [V x d]

    struct Named {
        std::string name;
        Tensor* tensor;
    };
    struct ConstNamed {
        std::string name;
        const Tensor* tensor;
    };
    /// Canonical tensor order shared by checkpoints and the optimizer.
    std::vector<Named> named_tensors();
    std::vector<ConstNamed> named_tensors() const;
    std::size_t parameter_count() const;

    bool operator==(const ModelState&) const = default;
};

ModelState init_model(const TransformerConfig& config);

/// Adds `delta` to one coordinate of the residual stream h^(layer) at
/// `position` before the rest of the network reads it.
struct ResidualPerturbation {
    std::size_t layer = 0;
    std::size_t position = 0;
    std::size_t dim = 0;
    double delta = 0.0;
};

/// Graph of one teacher-forced forward pass. The graph holds views into the
/// model's tensors, so the model must outlive the trace.
struct ForwardTrace {
    std::unique_ptr<diffcore::Graph> graph;
    TokenSeq tokens;
    std::vector<diffcore::NodeId> residual;  // h^(0..L), each [seq x d]
    diffcore::NodeId final_hidden = 0;       // rms_norm(h^(L)) rows feeding the LM head
    diffcore::NodeId logits = 0;             // [seq x V]
    diffcore::NodeId probs = 0;              // [seq x V]
    diffcore::NodeId embedding_leaf = 0;
    diffcore::NodeId lm_head_leaf = 0;
    std::vector<diffcore::NodeId> parameter_leaves;  // order of named_tensors()

    std::size_t seq_len() const { return tokens.size(); }
    /// Row `position` of h^(layer).
    std::span<const double> hidden(std::size_t layer, std::size_t position) const;
    std::span<const double> prob_row(std::size_t position) const;
};

ForwardTrace forward_full(const ModelState& model, std::span<const Token> tokens,
                          std::optional<ResidualPerturbation> perturbation = std::nullopt);

/// Like forward_full, but logits and probs hold only the listed positions:
/// row i belongs to position output_rows[i].
ForwardTrace forward_rows(const ModelState& model, std::span<const Token> tokens,
                          std::span<const std::size_t> output_rows);

struct GenerationRecord {
    TokenSeq prompt;
    TokenSeq response;              // includes a trailing eos when one was produced
    std::vector<double> chosen_probs;
    std::vector<double> entropies;  // omega_t, natural log
    double mean_entropy = 0.0;      // omega bar

    /// Response with eos and pad removed.
    TokenSeq content() const;
};

GenerationRecord greedy_decode(const ModelState& model, std::span<const Token> prompt, std::size_t max_new);

GenerationRecord sample_decode(const ModelState& model, std::span<const Token> prompt, double temperature,
                               std::uint64_t rng_seed, std::size_t max_new);

/// softmax(logits / temperature), stabilized by the row max.
std::vector<double> tempered_distribution(std::span<const double> logits, double temperature);

/// Index of the largest entry, lowest index on ties.
std::size_t argmax_lowest(std::span<const double> values);

/// Inverse-CDF draw from `probs` using a uniform in [0, 1).
std::size_t draw_categorical(std::span<const double> probs, double uniform01);

/// Logits row at the last position of `tokens`.
std::vector<double> next_token_logits(const ModelState& model, std::span<const Token> tokens);

}  // namespace sglab::model
