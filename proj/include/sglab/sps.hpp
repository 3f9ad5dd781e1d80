#pragma once

// Semantic Preservation Score: how much closer a hidden state keeps the
// paraphrases of one query than the originals of different queries.

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "sglab/model.hpp"
#include "sglab/synth.hpp"

namespace sglab::sps {

class SpsError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Hidden vectors h^(l) at offset t from the end of each prompt, for
/// layers 1..L-1 and offsets 1..T_off. Offset 1 is the last prompt token.
class HiddenBank {
  public:
    HiddenBank() = default;
    HiddenBank(std::size_t n_queries, std::size_t n_variants, std::size_t n_layers, std::size_t max_offset,
               std::size_t dim);

    std::size_t n_queries() const { return n_queries_; }
    std::size_t n_variants() const { return n_variants_; }  // K + 1, variant 0 is the original
    std::size_t n_layers() const { return n_layers_; }      // L of the model
    std::size_t max_offset() const { return max_offset_; }
    std::size_t dim() const { return dim_; }
    std::size_t vector_count() const { return n_queries_ * n_variants_ * (n_layers_ - 1) * max_offset_; }

    /// layer in [1, L-1], offset in [1, T_off].
    std::span<double> at(std::size_t query, std::size_t variant, std::size_t layer, std::size_t offset);
    std::span<const double> at(std::size_t query, std::size_t variant, std::size_t layer, std::size_t offset) const;

  private:
    std::size_t index(std::size_t query, std::size_t variant, std::size_t layer, std::size_t offset) const;

    std::size_t n_queries_ = 0, n_variants_ = 0, n_layers_ = 0, max_offset_ = 0, dim_ = 0;
    std::vector<double> data_;
};

/// Prompt-only forward of every variant of every item. All items must have
/// the same number of variants and queries of length >= max_offset.
HiddenBank collect_hidden_states(const model::ModelState& model, const synth::Dataset& dataset,
                                 std::size_t max_offset);

/// Largest usable offset count: min(8, shortest query).
std::size_t default_max_offset(const synth::Dataset& dataset);

/// Cosine similarity; 0 when either vector is all zeros.
double cosine(std::span<const double> a, std::span<const double> b);

struct SpsCell {
    std::size_t layer = 0;
    std::size_t offset = 0;
    double s_within = 0.0;
    double s_across = 0.0;
    double sps = 0.0;
};

struct SpsTable {
    std::size_t n_layers = 0;  // L of the model; the grid covers layers 1..L-1
    std::size_t max_offset = 0;
    std::size_t n_queries = 0;
    std::size_t n_paraphrases = 0;  // K
    std::vector<SpsCell> cells;     // layer-major, offsets ascending within a layer

    const SpsCell& cell(std::size_t layer, std::size_t offset) const;
};

SpsTable sps_table(const HiddenBank& bank);

struct SpsSelection {
    std::size_t t_star = 1;
    std::vector<std::size_t> band;
    std::vector<double> per_offset_mean;  // index t-1
};

/// Layers floor(L/2)+1 .. L-1.
std::vector<std::size_t> layer_band(std::size_t n_layers);

SpsSelection select_semantic_token(const SpsTable& table);

void write_table_csv(const SpsTable& table, const std::filesystem::path& path);
/// Reads the CSV back; n_queries and n_paraphrases are not stored and stay 0.
SpsTable read_table_csv(const std::filesystem::path& path);

void write_selection_json(const SpsSelection& selection, const std::filesystem::path& path);
SpsSelection read_selection_json(const std::filesystem::path& path);

}  // namespace sglab::sps
