#include "sglab/uq.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <set>
#include <thread>

#include "sglab/random.hpp"

namespace sglab::uq {

using diffcore::NodeId;
using model::Token;
using model::TokenSeq;

namespace {

bool has(const std::vector<std::string>& methods, const char* name) {
    return std::find(methods.begin(), methods.end(), name) != methods.end();
}

bool needs_backward(const std::vector<std::string>& methods) {
    return has(methods, "semgrad") || has(methods, "paragrad") || has(methods, "hybridgrad") ||
           has(methods, "semgrad_grid");
}

bool needs_samples(const std::vector<std::string>& methods) {
    return has(methods, "ln_pe") || has(methods, "pe") || has(methods, "self_consistency") ||
           has(methods, "semantic_entropy");
}

std::size_t grid_offsets(const UqConfig& config) {
    return config.grid_max_offset ? config.grid_max_offset : config.t_star;
}

void check_band(const UqConfig& config, std::size_t n_layers) {
    if (config.band.empty()) throw UqConfigError("layer band is empty");
    for (std::size_t l : config.band) {
        if (l < 1 || l >= n_layers) {
            throw UqConfigError("band layer " + std::to_string(l) + " outside 1.." + std::to_string(n_layers - 1));
        }
    }
}

std::size_t readout_position(std::size_t prompt_len, std::size_t offset) {
    if (offset < 1 || offset > prompt_len) {
        throw UqConfigError("token offset " + std::to_string(offset) + " beyond a prompt of length " +
                            std::to_string(prompt_len));
    }
    return prompt_len - offset;
}

std::vector<double> band_gradient(const ScoringTrace& st, const diffcore::GradientMap& gm,
                                  std::span<const std::size_t> layers, std::size_t offset) {
    const std::size_t pos = readout_position(st.prompt_len, offset);
    const std::size_t d = st.trace.graph->node(st.trace.residual[0]).shape[1];
    std::vector<double> out;
    out.reserve(layers.size() * d);
    for (std::size_t l : layers) {
        auto g = gm.at(st.trace.residual.at(l)).subspan(pos * d, d);
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

NodeId objective(ScoringTrace& st, bool entropy_weights) {
    if (entropy_weights) return weighted_loglik_node(st.trace, 0, st.response);
    const std::vector<double> ones(st.response.size(), 1.0);
    return weighted_loglik_node(st.trace, 0, st.response, std::span<const double>(ones));
}

std::vector<NodeId> readout_nodes(const ScoringTrace& st) {
    std::vector<NodeId> wanted(st.trace.residual.begin(), st.trace.residual.end());
    wanted.push_back(st.trace.lm_head_leaf);
    return wanted;
}

double exgrad_from_trace(const ScoringTrace& st) {
    const diffcore::Graph& g = *st.trace.graph;
    const auto& probs = g.node(st.trace.probs);
    const auto& xs = g.node(st.trace.final_hidden);
    const std::size_t V = probs.shape[1];
    const std::size_t d = xs.shape[1];
    const auto p = probs.values();
    const auto x = xs.values();
    std::vector<double> grad(V * d, 0.0);
    for (std::size_t t = 0; t < st.response.size(); ++t) {
        const double* xt = x.data() + t * d;
        for (std::size_t v = 0; v < V; ++v) {
            const double coef = (v == st.response[t] ? 1.0 : 0.0) - p[t * V + v];
            double* row = grad.data() + v * d;
            for (std::size_t k = 0; k < d; ++k) row[k] += coef * xt[k];
        }
    }
    return normalized_norm(grad, GradNorm::l1);
}

}  // namespace

void UqConfig::validate() const {
    if (!(tau > 0.0)) throw UqConfigError("tau must be > 0, got " + std::to_string(tau));
    if (!(beta >= 0.0)) throw UqConfigError("beta must be >= 0, got " + std::to_string(beta));
    if (mc_samples < 1) throw UqConfigError("mc_samples must be >= 1");
    if (!(temperature > 0.0)) throw UqConfigError("temperature must be > 0, got " + std::to_string(temperature));
    if (t_star < 1) throw UqConfigError("t_star must be >= 1");
    if (max_new < 1) throw UqConfigError("max_new must be >= 1");
    if (methods.empty()) throw UqConfigError("method list is empty");
    std::set<std::string> seen;
    for (const auto& m : methods) {
        if (std::find_if(std::begin(kMethodNames), std::end(kMethodNames), [&](const char* k) { return m == k; }) ==
            std::end(kMethodNames)) {
            throw UqConfigError("unknown method \"" + m + "\"");
        }
        if (!seen.insert(m).second) throw UqConfigError("method \"" + m + "\" listed twice");
    }
    if ((has(methods, "semgrad") || has(methods, "hybridgrad")) && band.empty()) {
        throw UqConfigError("layer band is empty");
    }
    if (has(methods, "semantic_entropy") && mc_samples < 2) {
        throw UqConfigError("semantic_entropy needs mc_samples >= 2");
    }
}

std::vector<std::string> score_columns(const UqConfig& config, std::size_t n_layers) {
    std::vector<std::string> out;
    for (const auto& m : config.methods) {
        if (m != "semgrad_grid") {
            out.push_back(m);
            continue;
        }
        for (std::size_t l = 1; l < n_layers; ++l) {
            for (std::size_t t = 1; t <= grid_offsets(config); ++t) {
                out.push_back("semgrad_l" + std::to_string(l) + "_t" + std::to_string(t));
            }
        }
    }
    return out;
}

ScoringTrace teacher_forced(const model::ModelState& model, const model::GenerationRecord& record) {
    if (record.response.empty()) throw EmptyResponseError();
    if (record.prompt.empty()) throw model::InputError("prompt is empty");
    ScoringTrace st;
    st.prompt_len = record.prompt.size();
    st.response = record.response;
    TokenSeq tokens = record.prompt;
    tokens.insert(tokens.end(), record.response.begin(), record.response.end());
    std::vector<std::size_t> rows(record.response.size());
    for (std::size_t t = 0; t < rows.size(); ++t) rows[t] = st.prompt_len - 1 + t;
    st.trace = model::forward_rows(model, tokens, rows);
    return st;
}

NodeId weighted_loglik_node(model::ForwardTrace& trace, std::size_t first_row, std::span<const Token> response,
                            std::optional<std::span<const double>> weights) {
    if (response.empty()) throw EmptyResponseError();
    diffcore::Graph& g = *trace.graph;
    const std::size_t n_rows = g.node(trace.probs).shape[0];
    if (first_row + response.size() > n_rows) {
        throw model::InputError("response span runs past the traced distributions");
    }
    std::vector<std::size_t> rows(response.size());
    for (std::size_t t = 0; t < rows.size(); ++t) rows[t] = first_row + t;
    const NodeId dist = g.gather(trace.probs, std::move(rows));
    const NodeId logp = g.log(g.pick(dist, std::vector<std::size_t>(response.begin(), response.end())));
    NodeId w = 0;
    if (weights) {
        if (weights->size() != response.size()) throw std::invalid_argument("one weight per response token expected");
        w = g.leaf({response.size()}, std::vector<double>(weights->begin(), weights->end()), false);
    } else {
        w = g.detach(g.entropy_row(dist));
    }
    return g.sum(g.mul(w, logp));
}

double normalized_norm(std::span<const double> grad, GradNorm norm) {
    if (grad.empty()) return 0.0;
    double acc = 0.0;
    if (norm == GradNorm::l1) {
        for (double x : grad) acc += std::abs(x);
        return acc / static_cast<double>(grad.size());
    }
    for (double x : grad) acc += x * x;
    return std::sqrt(acc) / std::sqrt(static_cast<double>(grad.size()));
}

double semgrad(const model::ModelState& model, const model::GenerationRecord& record, const UqConfig& config) {
    check_band(config, model.config.n_layers);
    ScoringTrace st = teacher_forced(model, record);
    readout_position(st.prompt_len, config.t_star);
    const NodeId root = objective(st, config.entropy_weights);
    const auto gm = st.trace.graph->backward(root, readout_nodes(st));
    return normalized_norm(band_gradient(st, gm, config.band, config.t_star), config.norm);
}

double paragrad(const model::ModelState& model, const model::GenerationRecord& record, const UqConfig& config) {
    ScoringTrace st = teacher_forced(model, record);
    const NodeId root = objective(st, config.entropy_weights);
    const NodeId head = st.trace.lm_head_leaf;
    const auto gm = st.trace.graph->backward(root, std::span<const NodeId>(&head, 1));
    return normalized_norm(gm.at(head), config.norm);
}

double exgrad(const model::ModelState& model, const model::GenerationRecord& record) {
    return exgrad_from_trace(teacher_forced(model, record));
}

double hybridgrad(double s_sem, double s_para, double omega_bar, double tau, double beta) {
    const double alpha = std::exp(-omega_bar / tau);
    return (1.0 - alpha) * s_sem + beta * alpha * s_para;
}

double gnll(const model::GenerationRecord& record) {
    if (record.chosen_probs.empty()) throw EmptyResponseError();
    double s = 0.0;
    for (double p : record.chosen_probs) s -= std::log(p);
    return s;
}

std::vector<model::GenerationRecord> draw_samples(const model::ModelState& model, std::span<const Token> prompt,
                                                  const UqConfig& config, std::uint64_t stream_seed) {
    std::vector<model::GenerationRecord> out;
    out.reserve(config.mc_samples);
    for (std::size_t m = 0; m < config.mc_samples; ++m) {
        out.push_back(
            model::sample_decode(model, prompt, config.temperature, mix_seed(stream_seed, m), config.max_new));
    }
    return out;
}

SampleEntropy predictive_entropy(std::span<const model::GenerationRecord> samples) {
    SampleEntropy out;
    double ln_total = 0.0, raw_total = 0.0;
    std::size_t used = 0;
    for (const auto& s : samples) {
        if (s.content().empty()) {
            ++out.excluded;
            continue;
        }
        double nll = 0.0;
        for (double p : s.chosen_probs) nll -= std::log(p);
        raw_total += nll;
        ln_total += nll / static_cast<double>(s.chosen_probs.size());
        ++used;
    }
    if (used == 0) throw std::runtime_error("ln_pe: every sample is empty");
    out.ln_pe = ln_total / static_cast<double>(used);
    out.pe = raw_total / static_cast<double>(used);
    return out;
}

double ln_pe(const model::ModelState& model, std::span<const Token> prompt, const UqConfig& config,
             std::uint64_t stream_seed) {
    return predictive_entropy(draw_samples(model, prompt, config, stream_seed)).ln_pe;
}

double self_consistency(std::span<const model::GenerationRecord> samples, const model::GenerationRecord& greedy) {
    if (samples.empty()) throw std::invalid_argument("self_consistency needs at least one sample");
    const TokenSeq target = greedy.content();
    std::size_t matches = 0;
    for (const auto& s : samples) {
        if (s.content() == target) ++matches;
    }
    return 1.0 - static_cast<double>(matches) / static_cast<double>(samples.size());
}

double semantic_entropy(std::span<const model::GenerationRecord> samples) {
    if (samples.empty()) throw std::invalid_argument("semantic_entropy needs at least one sample");
    std::map<TokenSeq, std::size_t> clusters;
    for (const auto& s : samples) ++clusters[s.content()];
    const double m = static_cast<double>(samples.size());
    double h = 0.0;
    for (const auto& [content, count] : clusters) {
        if (count == samples.size()) return 0.0;
        const double p = static_cast<double>(count) / m;
        h -= p * std::log(p);
    }
    return h;
}

double ScoredRecord::score(const std::string& method) const {
    for (const auto& [name, value] : scores) {
        if (name == method) return value;
    }
    throw std::out_of_range("no score named " + method);
}

std::uint64_t record_stream_seed(const UqConfig& config, std::uint64_t record_id) {
    return mix_seed(config.seed, record_id);
}

ScoredRecord score_record(const model::ModelState& model, const synth::QaItem& item, const UqConfig& config) {
    config.validate();
    const auto& methods = config.methods;
    const std::size_t L = model.config.n_layers;

    ScoredRecord out;
    out.record_id = item.id;
    out.generation = model::greedy_decode(model, item.query, config.max_new);
    const auto& gen = out.generation;
    if (gen.content().empty()) throw EmptyResponseError();

    std::optional<ScoringTrace> st;
    std::optional<diffcore::GradientMap> gm;
    if (needs_backward(methods) || has(methods, "exgrad")) st = teacher_forced(model, gen);
    if (needs_backward(methods)) {
        if (has(methods, "semgrad") || has(methods, "hybridgrad")) {
            check_band(config, L);
            readout_position(st->prompt_len, config.t_star);
        }
        const NodeId root = objective(*st, config.entropy_weights);
        gm = st->trace.graph->backward(root, readout_nodes(*st));
        out.backward_calls = st->trace.graph->backward_calls();
    }

    std::optional<double> s_sem, s_para;
    auto sem = [&] {
        if (!s_sem) s_sem = normalized_norm(band_gradient(*st, *gm, config.band, config.t_star), config.norm);
        return *s_sem;
    };
    auto para = [&] {
        if (!s_para) s_para = normalized_norm(gm->at(st->trace.lm_head_leaf), config.norm);
        return *s_para;
    };

    std::vector<model::GenerationRecord> samples;
    std::optional<SampleEntropy> entropy;
    if (needs_samples(methods)) samples = draw_samples(model, item.query, config, record_stream_seed(config, item.id));
    auto sample_entropy = [&]() -> const SampleEntropy& {
        if (!entropy) {
            entropy = predictive_entropy(samples);
            out.excluded_samples = entropy->excluded;
        }
        return *entropy;
    };

    for (const auto& m : methods) {
        if (m == "semgrad") {
            out.scores.emplace_back(m, sem());
        } else if (m == "paragrad") {
            out.scores.emplace_back(m, para());
        } else if (m == "hybridgrad") {
            out.scores.emplace_back(m, hybridgrad(sem(), para(), gen.mean_entropy, config.tau, config.beta));
        } else if (m == "exgrad") {
            out.scores.emplace_back(m, exgrad_from_trace(*st));
        } else if (m == "gnll") {
            out.scores.emplace_back(m, gnll(gen));
        } else if (m == "ln_pe") {
            out.scores.emplace_back(m, sample_entropy().ln_pe);
        } else if (m == "pe") {
            out.scores.emplace_back(m, sample_entropy().pe);
        } else if (m == "self_consistency") {
            out.scores.emplace_back(m, self_consistency(samples, gen));
        } else if (m == "semantic_entropy") {
            out.scores.emplace_back(m, semantic_entropy(samples));
        } else if (m == "semgrad_grid") {
            for (std::size_t l = 1; l < L; ++l) {
                const std::size_t layer[1] = {l};
                for (std::size_t t = 1; t <= grid_offsets(config); ++t) {
                    out.scores.emplace_back("semgrad_l" + std::to_string(l) + "_t" + std::to_string(t),
                                            normalized_norm(band_gradient(*st, *gm, layer, t), config.norm));
                }
            }
        }
    }
    return out;
}

BatchResult score_dataset(const model::ModelState& model, const synth::Dataset& dataset, const UqConfig& config,
                          std::size_t threads) {
    config.validate();
    const std::size_t n = dataset.size();
    std::vector<std::optional<ScoredRecord>> slots(n);
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                slots[i] = score_record(model, dataset[i], config);
            } catch (const EmptyResponseError&) {
                // left empty: excluded
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    BatchResult out;
    for (std::size_t i = 0; i < n; ++i) {
        if (errors[i]) std::rethrow_exception(errors[i]);
        if (slots[i]) {
            out.records.push_back(std::move(*slots[i]));
        } else {
            out.excluded_ids.push_back(dataset[i].id);
        }
    }
    return out;
}

}  // namespace sglab::uq
