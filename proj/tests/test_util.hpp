#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sglab/model.hpp"
#include "sglab/random.hpp"
#include "sglab/uq.hpp"

namespace sglab::testing {

inline std::vector<double> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

inline model::TransformerConfig tiny_config(std::uint64_t seed, std::size_t vocab = 32) {
    model::TransformerConfig c;
    c.n_layers = 4;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = vocab;
    c.max_seq_len = 12;
    c.init_seed = seed;
    return c;
}

/// Init weights are small (std 0.02); scale them up so outputs are far from
/// uniform and gradients are not vanishingly small.
inline model::ModelState sharpened_model(const model::TransformerConfig& c, double factor = 10.0) {
    model::ModelState m = model::init_model(c);
    for (auto& nt : m.named_tensors()) {
        if (nt.name.find("gain") != std::string::npos) continue;
        for (double& x : nt.tensor->data) x *= factor;
    }
    return m;
}

inline model::TokenSeq random_tokens(Rng& rng, std::size_t n, std::size_t vocab, std::size_t lowest = 3) {
    model::TokenSeq t(n);
    for (auto& x : t) x = static_cast<model::Token>(lowest + rng.below(vocab - lowest));
    return t;
}

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("sglab_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

/// Natural-log entropy of a distribution, 0 ln 0 taken as 0.
inline double entropy_of(std::span<const double> p) {
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

/// sum_t w_t ln p(response_t) from a plain forward pass, optionally with one
/// residual coordinate perturbed. Independent of the graph-side objective.
inline double objective_value(const model::ModelState& m, const model::GenerationRecord& rec,
                              std::span<const double> weights,
                              std::optional<model::ResidualPerturbation> pert = std::nullopt) {
    model::TokenSeq tokens = rec.prompt;
    tokens.insert(tokens.end(), rec.response.begin(), rec.response.end());
    const auto tr = model::forward_full(m, tokens, pert);
    double s = 0.0;
    for (std::size_t t = 0; t < rec.response.size(); ++t)
        s += weights[t] * std::log(tr.prob_row(rec.prompt.size() - 1 + t)[rec.response[t]]);
    return s;
}

/// Entropy weights of the teacher-forced distributions of `rec`.
inline std::vector<double> teacher_forced_entropies(const model::ModelState& m, const model::GenerationRecord& rec) {
    model::TokenSeq tokens = rec.prompt;
    tokens.insert(tokens.end(), rec.response.begin(), rec.response.end());
    const auto tr = model::forward_full(m, tokens);
    std::vector<double> w;
    for (std::size_t t = 0; t < rec.response.size(); ++t) w.push_back(entropy_of(tr.prob_row(rec.prompt.size() - 1 + t)));
    return w;
}

struct ObjectiveGradients {
    double value = 0.0;
    std::vector<std::vector<double>> residual;  // d objective / d h^(l), [seq x d] flattened
    std::vector<double> lm_head;
    std::uint64_t backward_calls = 0;
};

/// Graph-side gradients of the weighted objective. Without explicit weights
/// the detached entropy weights are used.
inline ObjectiveGradients objective_gradients(const model::ModelState& m, const model::GenerationRecord& rec,
                                              std::optional<std::span<const double>> weights = std::nullopt) {
    uq::ScoringTrace st = uq::teacher_forced(m, rec);
    const diffcore::NodeId root = uq::weighted_loglik_node(st.trace, 0, st.response, weights);
    std::vector<diffcore::NodeId> wanted(st.trace.residual.begin(), st.trace.residual.end());
    wanted.push_back(st.trace.lm_head_leaf);
    const auto gm = st.trace.graph->backward(root, wanted);
    ObjectiveGradients out;
    out.value = st.trace.graph->values(root)[0];
    for (auto id : st.trace.residual) {
        auto g = gm.at(id);
        out.residual.emplace_back(g.begin(), g.end());
    }
    auto h = gm.at(st.trace.lm_head_leaf);
    out.lm_head.assign(h.begin(), h.end());
    out.backward_calls = st.trace.graph->backward_calls();
    return out;
}

/// A seeded prompt of `prompt_len` tokens and its greedy response.
inline model::GenerationRecord random_record(const model::ModelState& m, Rng& rng, std::size_t prompt_len,
                                             std::size_t max_new) {
    const auto prompt = random_tokens(rng, prompt_len, m.config.vocab_size);
    return model::greedy_decode(m, prompt, max_new);
}

}  // namespace sglab::testing
