#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sglab/model.hpp"
#include "sglab/synth.hpp"

namespace sglab::train {

class NumericalError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip_norm = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// Parameter tensor the optimizer may update in place.
struct ParamRef {
    std::string name;
    std::span<double> values;
};

/// Global-norm clipping at cfg.grad_clip_norm, then one bias-corrected Adam
/// update at step t (t >= 1). Throws NumericalError naming the first tensor
/// with a non-finite gradient, before touching any parameter.
void adam_step(std::span<const ParamRef> params, std::span<const std::vector<double>> grads, AdamState& state,
               std::uint64_t t, const TrainConfig& cfg);

std::vector<ParamRef> param_refs(model::ModelState& m);

struct PairLoss {
    double loss_sum = 0.0;      // sum of -ln p(target) over masked positions
    std::size_t token_count = 0;
    std::vector<std::vector<double>> grads;  // d loss_sum / d param, named_tensors() order
};

/// Cross-entropy of one training pair over its loss mask, with gradients.
PairLoss pair_loss(const model::ModelState& m, const synth::TrainingPair& pair);

struct TrainResult {
    std::vector<double> epoch_loss;  // mean per-token loss, one per epoch
    std::uint64_t steps = 0;
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

/// Adam on response-masked cross-entropy. Batch loss is the mean over the
/// batch's masked tokens. Deterministic given cfg.seed.
TrainResult train(model::ModelState& m, const synth::Dataset& dataset, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Fraction of (non-held-out item, surface form) queries whose greedy
/// response exactly equals one of the item's answers.
double train_exact_match(const model::ModelState& m, const synth::Dataset& dataset, std::size_t max_new);

void write_loss_csv(std::span<const double> epoch_loss, const std::filesystem::path& path);

// Checkpoint container: "SGUQCKPT", u16 LE version, u32 LE header length,
// UTF-8 JSON header {config, tensors: [{name, shape, offset}]}, then the
// float64 LE payload. Offsets are bytes from the payload start.
inline constexpr char kCheckpointMagic[8] = {'S', 'G', 'U', 'Q', 'C', 'K', 'P', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const model::ModelState& m);
model::ModelState deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const model::ModelState& m, const std::filesystem::path& path);
model::ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace sglab::train
