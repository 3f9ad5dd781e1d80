#include "sglab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sglab/random.hpp"

namespace sglab::model {

using diffcore::Graph;
using diffcore::NodeId;

void TransformerConfig::validate() const {
    if (n_layers < 4) {
        throw ConfigError("n_layers must be >= 4 so the upper layer band is non-empty, got " +
                          std::to_string(n_layers));
    }
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
        throw ConfigError("n_heads (" + std::to_string(n_heads) + ") must divide d_model (" +
                          std::to_string(d_model) + ")");
    }
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4, got " + std::to_string(vocab_size));
    if (max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
}

Tensor Tensor::zeros(diffcore::Shape shape) {
    Tensor t;
    t.data.assign(diffcore::element_count(shape), 0.0);
    t.shape = std::move(shape);
    return t;
}

std::vector<ModelState::Named> ModelState::named_tensors() {
    std::vector<Named> out;
    out.push_back({"embedding", &embedding});
    out.push_back({"positional", &positional});
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        auto& w = layers[l];
        out.push_back({p + "wq", &w.wq});
        out.push_back({p + "wk", &w.wk});
        out.push_back({p + "wv", &w.wv});
        out.push_back({p + "wo", &w.wo});
        out.push_back({p + "w1", &w.w1});
        out.push_back({p + "w2", &w.w2});
        out.push_back({p + "attn_gain", &w.attn_gain});
        out.push_back({p + "ffn_gain", &w.ffn_gain});
    }
    out.push_back({"final_gain", &final_gain});
    out.push_back({"lm_head", &lm_head});
    return out;
}

std::vector<ModelState::ConstNamed> ModelState::named_tensors() const {
    std::vector<ConstNamed> out;
    for (auto& n : const_cast<ModelState*>(this)->named_tensors()) out.push_back({n.name, n.tensor});
    return out;
}

std::size_t ModelState::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : named_tensors()) n += t.tensor->data.size();
    return n;
}

ModelState init_model(const TransformerConfig& config) {
    config.validate();
    const std::size_t d = config.d_model;
    Rng rng(config.init_seed);
    const double std_dev = 0.02;
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));

    auto normal = [&](diffcore::Shape shape, double sd) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (double& v : t.data) v = sd * rng.normal();
        return t;
    };
    auto ones = [](std::size_t n) {
        Tensor t = Tensor::zeros({n});
        std::fill(t.data.begin(), t.data.end(), 1.0);
        return t;
    };

    ModelState m;
    m.config = config;
    m.embedding = normal({config.vocab_size, d}, std_dev);
    m.positional = normal({config.max_seq_len, d}, std_dev);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights w;
        w.wq = normal({d, d}, std_dev);
        w.wk = normal({d, d}, std_dev);
        w.wv = normal({d, d}, std_dev);
        w.wo = normal({d, d}, std_dev * out_scale);
        w.w1 = normal({config.d_ff, d}, std_dev);
        w.w2 = normal({d, config.d_ff}, std_dev * out_scale);
        w.attn_gain = ones(d);
        w.ffn_gain = ones(d);
        m.layers.push_back(std::move(w));
    }
    m.final_gain = ones(d);
    m.lm_head = normal({config.vocab_size, d}, std_dev);
    return m;
}

// ---------------------------------------------------------------------------

std::span<const double> ForwardTrace::hidden(std::size_t layer, std::size_t position) const {
    const auto& n = graph->node(residual.at(layer));
    const std::size_t d = n.shape[1];
    return n.values().subspan(position * d, d);
}

std::span<const double> ForwardTrace::prob_row(std::size_t position) const {
    const auto& n = graph->node(probs);
    const std::size_t v = n.shape[1];
    return n.values().subspan(position * v, v);
}

namespace {

void check_tokens(const TransformerConfig& c, std::span<const Token> tokens) {
    if (tokens.empty()) throw InputError("token sequence is empty");
    if (tokens.size() > c.max_seq_len) {
        throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                         std::to_string(c.max_seq_len));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= c.vocab_size) {
            throw InputError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                             " is not below vocab_size " + std::to_string(c.vocab_size));
        }
    }
}

}  // namespace

namespace {

ForwardTrace forward_impl(const ModelState& model, std::span<const Token> tokens,
                          const std::optional<ResidualPerturbation>& perturbation,
                          const std::vector<std::size_t>* output_rows) {
    const TransformerConfig& c = model.config;
    check_tokens(c, tokens);
    const std::size_t n = tokens.size();
    const std::size_t d = c.d_model;
    const std::size_t dh = c.head_dim();

    ForwardTrace tr;
    tr.graph = std::make_unique<Graph>();
    tr.tokens.assign(tokens.begin(), tokens.end());
    Graph& g = *tr.graph;

    for (const auto& nt : model.named_tensors()) {
        tr.parameter_leaves.push_back(g.leaf_view(nt.tensor->shape, nt.tensor->data));
    }
    std::size_t next_leaf = 0;
    auto take = [&] { return tr.parameter_leaves[next_leaf++]; };

    const NodeId emb = take();
    const NodeId pos = take();
    tr.embedding_leaf = emb;

    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    std::vector<std::size_t> positions(n);
    std::iota(positions.begin(), positions.end(), std::size_t{0});

    auto perturb = [&](NodeId h, std::size_t layer) {
        if (!perturbation || perturbation->layer != layer) return h;
        if (perturbation->position >= n || perturbation->dim >= d) {
            throw InputError("perturbation coordinate outside the residual stream");
        }
        std::vector<double> delta(n * d, 0.0);
        delta[perturbation->position * d + perturbation->dim] = perturbation->delta;
        return g.add(h, g.leaf({n, d}, std::move(delta), false));
    };

    NodeId h = g.add(g.embedding_lookup(emb, ids), g.gather(pos, positions));
    h = perturb(h, 0);
    tr.residual.push_back(h);

    std::vector<std::uint8_t> causal(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) causal[i * n + j] = 1;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const NodeId wq = take(), wk = take(), wv = take(), wo = take();
        const NodeId w1 = take(), w2 = take(), attn_gain = take(), ffn_gain = take();

        const NodeId a = g.rms_norm(h, attn_gain);
        const NodeId q = g.matmul(a, wq, true);
        const NodeId k = g.matmul(a, wk, true);
        const NodeId v = g.matmul(a, wv, true);

        std::vector<NodeId> heads;
        for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
            const std::size_t b = hd * dh, e = b + dh;
            const NodeId qh = c.n_heads == 1 ? q : g.slice(q, 1, b, e);
            const NodeId kh = c.n_heads == 1 ? k : g.slice(k, 1, b, e);
            const NodeId vh = c.n_heads == 1 ? v : g.slice(v, 1, b, e);
            NodeId scores = g.scale(g.matmul(qh, kh, true), inv_sqrt_dh);
            scores = g.masked_fill(scores, causal, -std::numeric_limits<double>::infinity());
            heads.push_back(g.matmul(g.softmax_row(scores), vh));
        }
        const NodeId mixed = heads.size() == 1 ? heads[0] : g.concat(heads, 1);
        const NodeId hm = g.add(h, g.matmul(mixed, wo, true));

        const NodeId f = g.rms_norm(hm, ffn_gain);
        const NodeId ff = g.matmul(g.silu(g.matmul(f, w1, true)), w2, true);
        h = perturb(g.add(hm, ff), l + 1);
        tr.residual.push_back(h);
    }

    const NodeId final_gain = take();
    const NodeId head = take();
    tr.lm_head_leaf = head;
    if (output_rows) {
        for (std::size_t r : *output_rows) {
            if (r >= n) throw InputError("output row " + std::to_string(r) + " outside the sequence");
        }
        h = g.gather(h, *output_rows);
    }
    tr.final_hidden = g.rms_norm(h, final_gain);
    tr.logits = g.matmul(tr.final_hidden, head, true);
    tr.probs = g.softmax_row(tr.logits);
    return tr;
}

}  // namespace

ForwardTrace forward_full(const ModelState& model, std::span<const Token> tokens,
                          std::optional<ResidualPerturbation> perturbation) {
    return forward_impl(model, tokens, perturbation, nullptr);
}

ForwardTrace forward_rows(const ModelState& model, std::span<const Token> tokens,
                          std::span<const std::size_t> output_rows) {
    const std::vector<std::size_t> rows(output_rows.begin(), output_rows.end());
    return forward_impl(model, tokens, std::nullopt, &rows);
}

// ---------------------------------------------------------------------------

TokenSeq GenerationRecord::content() const {
    TokenSeq out;
    for (Token t : response) {
        if (t != kEos && t != kPad) out.push_back(t);
    }
    return out;
}

std::size_t argmax_lowest(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

std::vector<double> tempered_distribution(std::span<const double> logits, double temperature) {
    if (!(temperature > 0.0)) {
        throw InputError("temperature must be positive, got " + std::to_string(temperature));
    }
    std::vector<double> p(logits.size());
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp((logits[i] - mx) / temperature);
        z += p[i];
    }
    for (double& x : p) x /= z;
    return p;
}

std::size_t draw_categorical(std::span<const double> probs, double uniform01) {
    double cum = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        last_positive = i;
        cum += probs[i];
        if (uniform01 < cum) return i;
    }
    return last_positive;
}

std::vector<double> next_token_logits(const ModelState& model, std::span<const Token> tokens) {
    if (tokens.empty()) throw InputError("token sequence is empty");
    const std::size_t last = tokens.size() - 1;
    ForwardTrace tr = forward_rows(model, tokens, std::span<const std::size_t>(&last, 1));
    auto row = tr.graph->values(tr.logits);
    return {row.begin(), row.end()};
}

namespace {

template <typename Choose>
GenerationRecord decode(const ModelState& model, std::span<const Token> prompt, std::size_t max_new, Choose choose) {
    if (prompt.empty()) throw InputError("prompt is empty");
    if (max_new == 0 || prompt.size() >= model.config.max_seq_len) {
        throw InputError("no room for a new token after a prompt of length " + std::to_string(prompt.size()));
    }
    GenerationRecord rec;
    rec.prompt.assign(prompt.begin(), prompt.end());
    TokenSeq seq = rec.prompt;
    while (rec.response.size() < max_new && seq.size() < model.config.max_seq_len) {
        const std::vector<double> logits = next_token_logits(model, seq);
        auto [token, dist] = choose(logits);
        rec.response.push_back(static_cast<Token>(token));
        rec.chosen_probs.push_back(dist[token]);
        rec.entropies.push_back(diffcore::entropy_of_row(dist));
        seq.push_back(static_cast<Token>(token));
        if (token == kEos) break;
    }
    double total = 0.0;
    for (double w : rec.entropies) total += w;
    rec.mean_entropy = total / static_cast<double>(rec.entropies.size());
    return rec;
}

}  // namespace

GenerationRecord greedy_decode(const ModelState& model, std::span<const Token> prompt, std::size_t max_new) {
    return decode(model, prompt, max_new, [](const std::vector<double>& logits) {
        std::vector<double> dist = tempered_distribution(logits, 1.0);
        return std::pair{argmax_lowest(logits), std::move(dist)};
    });
}

GenerationRecord sample_decode(const ModelState& model, std::span<const Token> prompt, double temperature,
                               std::uint64_t rng_seed, std::size_t max_new) {
    if (!(temperature > 0.0)) {
        throw InputError("temperature must be positive, got " + std::to_string(temperature));
    }
    Rng rng(rng_seed);
    return decode(model, prompt, max_new, [&](const std::vector<double>& logits) {
        std::vector<double> dist = tempered_distribution(logits, temperature);
        const std::size_t token = draw_categorical(dist, rng.uniform());
        return std::pair{token, std::move(dist)};
    });
}

}  // namespace sglab::model
