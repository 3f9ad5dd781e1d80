#include "sglab/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sglab/random.hpp"

namespace sglab::train {

using diffcore::NodeId;
using ordered_json = nlohmann::ordered_json;

void TrainConfig::validate() const {
    if (epochs == 0) throw std::invalid_argument("epochs must be positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw std::invalid_argument("beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("beta2 must lie in (0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
    if (!(grad_clip_norm > 0.0)) throw std::invalid_argument("grad_clip_norm must be positive");
}

std::vector<ParamRef> param_refs(model::ModelState& m) {
    std::vector<ParamRef> out;
    for (auto& nt : m.named_tensors()) out.push_back({nt.name, nt.tensor->data});
    return out;
}

void adam_step(std::span<const ParamRef> params, std::span<const std::vector<double>> grads, AdamState& state,
               std::uint64_t t, const TrainConfig& cfg) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam_step: params and grads differ in count");
    if (t == 0) throw std::invalid_argument("adam_step: step index starts at 1");
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i].values.size()) {
            throw std::invalid_argument("adam_step: gradient size mismatch for " + params[i].name);
        }
        for (double g : grads[i]) {
            if (!std::isfinite(g)) throw NumericalError("non-finite gradient in tensor " + params[i].name);
            sq += g * g;
        }
    }
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), {});
        state.v.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].values.size(), 0.0);
            state.v[i].assign(params[i].values.size(), 0.0);
        }
    }

    const double norm = std::sqrt(sq);
    const double clip = norm > cfg.grad_clip_norm ? cfg.grad_clip_norm / norm : 1.0;
    const double td = static_cast<double>(t);
    const double bc1 = 1.0 - std::pow(cfg.beta1, td);
    const double bc2 = 1.0 - std::pow(cfg.beta2, td);

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        auto p = params[i].values;
        const auto& g = grads[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = g[j] * clip;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

namespace {

// Masked cross-entropy of one pair. Gradients are added into `acc` when given,
// otherwise copied into the result.
PairLoss masked_loss(const model::ModelState& m, const synth::TrainingPair& pair,
                     std::vector<std::vector<double>>* acc) {
    std::vector<std::size_t> rows, cols;
    for (std::size_t i = 0; i < pair.target.size(); ++i) {
        if (pair.loss_mask[i]) {
            rows.push_back(i);
            cols.push_back(pair.target[i]);
        }
    }
    PairLoss out;
    out.token_count = rows.size();
    if (rows.empty()) {
        if (!acc) {
            for (const auto& nt : m.named_tensors()) out.grads.emplace_back(nt.tensor->data.size(), 0.0);
        }
        return out;
    }
    model::ForwardTrace tr = model::forward_rows(m, pair.input, rows);
    diffcore::Graph& g = *tr.graph;
    const NodeId logp = g.log(g.pick(tr.probs, std::move(cols)));
    const NodeId loss = g.scale(g.sum(logp), -1.0);
    out.loss_sum = g.values(loss)[0];

    diffcore::GradientMap gm = g.backward(loss, tr.parameter_leaves);
    if (!acc) out.grads.reserve(tr.parameter_leaves.size());
    for (std::size_t i = 0; i < tr.parameter_leaves.size(); ++i) {
        auto s = gm.at(tr.parameter_leaves[i]);
        if (acc) {
            auto& a = (*acc)[i];
            for (std::size_t j = 0; j < a.size(); ++j) a[j] += s[j];
        } else {
            out.grads.emplace_back(s.begin(), s.end());
        }
    }
    return out;
}

}  // namespace

PairLoss pair_loss(const model::ModelState& m, const synth::TrainingPair& pair) {
    return masked_loss(m, pair, nullptr);
}

TrainResult train(model::ModelState& m, const synth::Dataset& dataset, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
    cfg.validate();
    std::vector<ParamRef> refs = param_refs(m);
    AdamState state;
    TrainResult result;

    std::vector<std::vector<double>> acc(refs.size());
    for (std::size_t i = 0; i < refs.size(); ++i) acc[i].assign(refs[i].values.size(), 0.0);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<synth::TrainingPair> pairs = synth::to_training_pairs(dataset, mix_seed(cfg.seed, 2 * epoch));
        if (pairs.empty()) throw std::invalid_argument("dataset has no training pairs");
        std::vector<std::size_t> order(pairs.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng(mix_seed(cfg.seed, 2 * epoch + 1)).shuffle(order.begin(), order.end());

        double epoch_loss = 0.0;
        std::size_t epoch_tokens = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            for (auto& a : acc) std::fill(a.begin(), a.end(), 0.0);
            double batch_loss = 0.0;
            std::size_t batch_tokens = 0;
            for (std::size_t b = start; b < stop; ++b) {
                const PairLoss pl = masked_loss(m, pairs[order[b]], &acc);
                batch_loss += pl.loss_sum;
                batch_tokens += pl.token_count;
            }
            if (!std::isfinite(batch_loss)) {
                throw NumericalError("non-finite loss in epoch " + std::to_string(epoch + 1));
            }
            if (batch_tokens == 0) continue;
            const double inv = 1.0 / static_cast<double>(batch_tokens);
            for (auto& a : acc)
                for (double& x : a) x *= inv;
            adam_step(refs, acc, state, ++result.steps, cfg);
            epoch_loss += batch_loss;
            epoch_tokens += batch_tokens;
        }
        const double mean = epoch_loss / static_cast<double>(std::max<std::size_t>(epoch_tokens, 1));
        result.epoch_loss.push_back(mean);
        if (on_epoch) on_epoch(epoch + 1, mean);
    }
    return result;
}

double train_exact_match(const model::ModelState& m, const synth::Dataset& dataset, std::size_t max_new) {
    std::size_t total = 0, hits = 0;
    for (const auto& item : dataset) {
        if (item.held_out) continue;
        for (std::size_t s = 0; s < item.variant_count(); ++s) {
            const auto rec = model::greedy_decode(m, item.variant(s), max_new);
            const auto content = rec.content();
            ++total;
            if (std::find(item.answers.begin(), item.answers.end(), content) != item.answers.end()) ++hits;
        }
    }
    return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

void write_loss_csv(std::span<const double> epoch_loss, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "epoch,mean_loss\n" << std::setprecision(17);
    for (std::size_t i = 0; i < epoch_loss.size(); ++i) out << (i + 1) << ',' << epoch_loss[i] << '\n';
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
    b.push_back(static_cast<std::uint8_t>(v & 0xFF));
    b.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::vector<std::uint8_t>& b, double x) {
    const auto v = std::bit_cast<std::uint64_t>(x);
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::span<const std::uint8_t> b, std::size_t at, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

ordered_json config_json(const model::TransformerConfig& c) {
    ordered_json j;
    j["n_layers"] = c.n_layers;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["d_ff"] = c.d_ff;
    j["vocab_size"] = c.vocab_size;
    j["max_seq_len"] = c.max_seq_len;
    j["init_seed"] = c.init_seed;
    return j;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const model::ModelState& m) {
    ordered_json header;
    header["config"] = config_json(m.config);
    ordered_json manifest = ordered_json::array();
    std::size_t offset = 0;
    for (const auto& nt : m.named_tensors()) {
        ordered_json e;
        e["name"] = nt.name;
        e["shape"] = nt.tensor->shape;
        e["offset"] = offset;
        manifest.push_back(e);
        offset += nt.tensor->data.size() * sizeof(double);
    }
    header["tensors"] = manifest;
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    put_u16(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset);
    for (const auto& nt : m.named_tensors())
        for (double x : nt.tensor->data) put_f64(out, x);
    return out;
}

model::ModelState deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t fixed = sizeof(kCheckpointMagic) + 2 + 4;
    if (bytes.size() < fixed) throw CheckpointError("truncated checkpoint header");
    if (!std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin(),
                    [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; })) {
        throw CheckpointError("bad magic");
    }
    const auto version = static_cast<std::uint16_t>(get_le(bytes, 8, 2));
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto header_len = static_cast<std::size_t>(get_le(bytes, 10, 4));
    if (bytes.size() < fixed + header_len) throw CheckpointError("truncated checkpoint header");

    ordered_json header;
    try {
        header = ordered_json::parse(bytes.begin() + fixed, bytes.begin() + static_cast<std::ptrdiff_t>(fixed + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    const auto payload = bytes.subspan(fixed + header_len);

    model::TransformerConfig config;
    try {
        const auto& c = header.at("config");
        config.n_layers = c.at("n_layers").get<std::size_t>();
        config.d_model = c.at("d_model").get<std::size_t>();
        config.n_heads = c.at("n_heads").get<std::size_t>();
        config.d_ff = c.at("d_ff").get<std::size_t>();
        config.vocab_size = c.at("vocab_size").get<std::size_t>();
        config.max_seq_len = c.at("max_seq_len").get<std::size_t>();
        config.init_seed = c.at("init_seed").get<std::uint64_t>();
        config.validate();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
    } catch (const model::ConfigError& e) {
        throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
    }

    // Shapes come from the config; the manifest must agree with them.
    model::ModelState m = model::init_model(config);
    auto named = m.named_tensors();
    const auto& tensors = header.at("tensors");
    if (!tensors.is_array() || tensors.size() != named.size()) {
        throw CheckpointError("manifest lists " + std::to_string(tensors.size()) + " tensors, expected " +
                              std::to_string(named.size()));
    }
    std::size_t expected_offset = 0;
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& e = tensors[i];
        std::string name;
        diffcore::Shape shape;
        std::size_t offset = 0;
        try {
            name = e.at("name").get<std::string>();
            shape = e.at("shape").get<diffcore::Shape>();
            offset = e.at("offset").get<std::size_t>();
        } catch (const nlohmann::json::exception& ex) {
            throw CheckpointError(std::string("bad manifest entry: ") + ex.what());
        }
        if (name != named[i].name || shape != named[i].tensor->shape) {
            throw CheckpointError("manifest entry " + std::to_string(i) + " (" + name + ") does not match layout");
        }
        if (offset != expected_offset) throw CheckpointError("manifest offsets overlap or leave gaps at " + name);
        const std::size_t n = named[i].tensor->data.size();
        if (offset + n * sizeof(double) > payload.size()) throw CheckpointError("truncated payload at " + name);
        auto& data = named[i].tensor->data;
        for (std::size_t j = 0; j < n; ++j) {
            data[j] = std::bit_cast<double>(get_le(payload, offset + j * sizeof(double), 8));
        }
        expected_offset = offset + n * sizeof(double);
    }
    if (expected_offset != payload.size()) throw CheckpointError("trailing bytes after payload");
    return m;
}

void save_checkpoint(const model::ModelState& m, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(m);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

model::ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace sglab::train
