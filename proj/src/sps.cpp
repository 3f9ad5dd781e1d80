#include "sglab/sps.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace sglab::sps {

HiddenBank::HiddenBank(std::size_t n_queries, std::size_t n_variants, std::size_t n_layers, std::size_t max_offset,
                       std::size_t dim)
    : n_queries_(n_queries), n_variants_(n_variants), n_layers_(n_layers), max_offset_(max_offset), dim_(dim) {
    if (n_layers < 2) throw SpsError("hidden bank needs at least two layers");
    if (max_offset == 0) throw SpsError("max_offset must be positive");
    data_.assign(vector_count() * dim, 0.0);
}

std::size_t HiddenBank::index(std::size_t query, std::size_t variant, std::size_t layer, std::size_t offset) const {
    if (query >= n_queries_ || variant >= n_variants_ || layer < 1 || layer >= n_layers_ || offset < 1 ||
        offset > max_offset_) {
        throw std::out_of_range("hidden bank index out of range");
    }
    return (((query * n_variants_ + variant) * (n_layers_ - 1) + (layer - 1)) * max_offset_ + (offset - 1)) * dim_;
}

std::span<double> HiddenBank::at(std::size_t query, std::size_t variant, std::size_t layer, std::size_t offset) {
    return std::span<double>(data_).subspan(index(query, variant, layer, offset), dim_);
}

std::span<const double> HiddenBank::at(std::size_t query, std::size_t variant, std::size_t layer,
                                       std::size_t offset) const {
    return std::span<const double>(data_).subspan(index(query, variant, layer, offset), dim_);
}

std::size_t default_max_offset(const synth::Dataset& dataset) {
    std::size_t shortest = 8;
    for (const auto& item : dataset) {
        for (std::size_t v = 0; v < item.variant_count(); ++v) shortest = std::min(shortest, item.variant(v).size());
    }
    return shortest;
}

HiddenBank collect_hidden_states(const model::ModelState& model, const synth::Dataset& dataset,
                                 std::size_t max_offset) {
    if (dataset.empty()) throw SpsError("dataset is empty");
    const std::size_t variants = dataset.front().variant_count();
    const std::size_t L = model.config.n_layers;
    for (const auto& item : dataset) {
        if (item.variant_count() != variants) {
            throw SpsError("item " + std::to_string(item.id) + " has " + std::to_string(item.variant_count()) +
                           " variants, expected " + std::to_string(variants));
        }
        for (std::size_t v = 0; v < variants; ++v) {
            if (item.variant(v).size() < max_offset) {
                throw SpsError("item " + std::to_string(item.id) + " variant " + std::to_string(v) + " has " +
                               std::to_string(item.variant(v).size()) + " tokens, fewer than max_offset " +
                               std::to_string(max_offset));
            }
        }
    }

    HiddenBank bank(dataset.size(), variants, L, max_offset, model.config.d_model);
    for (std::size_t n = 0; n < dataset.size(); ++n) {
        for (std::size_t v = 0; v < variants; ++v) {
            const auto& prompt = dataset[n].variant(v);
            const std::size_t last = prompt.size() - 1;
            const model::ForwardTrace tr = model::forward_rows(model, prompt, std::span<const std::size_t>(&last, 1));
            for (std::size_t l = 1; l < L; ++l) {
                for (std::size_t t = 1; t <= max_offset; ++t) {
                    auto src = tr.hidden(l, prompt.size() - t);
                    std::copy(src.begin(), src.end(), bank.at(n, v, l, t).begin());
                }
            }
        }
    }
    return bank;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

const SpsCell& SpsTable::cell(std::size_t layer, std::size_t offset) const {
    if (layer < 1 || layer >= n_layers || offset < 1 || offset > max_offset) {
        throw std::out_of_range("sps cell (" + std::to_string(layer) + ", " + std::to_string(offset) +
                                ") outside the grid");
    }
    return cells[(layer - 1) * max_offset + (offset - 1)];
}

SpsTable sps_table(const HiddenBank& bank) {
    const std::size_t N = bank.n_queries();
    const std::size_t variants = bank.n_variants();
    if (N < 2) throw SpsError("sps needs at least 2 queries, got " + std::to_string(N));
    if (variants < 2) throw SpsError("sps needs at least 1 paraphrase per query");
    const std::size_t K = variants - 1;

    SpsTable table;
    table.n_layers = bank.n_layers();
    table.max_offset = bank.max_offset();
    table.n_queries = N;
    table.n_paraphrases = K;
    for (std::size_t l = 1; l < bank.n_layers(); ++l) {
        for (std::size_t t = 1; t <= bank.max_offset(); ++t) {
            double within = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                double s = 0.0;
                for (std::size_t i = 0; i < variants; ++i) {
                    for (std::size_t j = 0; j < variants; ++j) {
                        if (i != j) s += cosine(bank.at(n, i, l, t), bank.at(n, j, l, t));
                    }
                }
                within += s / static_cast<double>(K * (K + 1));
            }
            within /= static_cast<double>(N);

            double across = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t m = 0; m < N; ++m) {
                    if (n != m) across += cosine(bank.at(n, 0, l, t), bank.at(m, 0, l, t));
                }
            }
            across /= static_cast<double>(N * (N - 1));
            table.cells.push_back({l, t, within, across, within - across});
        }
    }
    return table;
}

std::vector<std::size_t> layer_band(std::size_t n_layers) {
    std::vector<std::size_t> band;
    for (std::size_t l = n_layers / 2 + 1; l < n_layers; ++l) band.push_back(l);
    return band;
}

SpsSelection select_semantic_token(const SpsTable& table) {
    if (table.n_layers < 2 || table.max_offset == 0 || table.cells.size() != (table.n_layers - 1) * table.max_offset) {
        throw SpsError("sps table is incomplete");
    }
    SpsSelection sel;
    sel.per_offset_mean.assign(table.max_offset, 0.0);
    for (std::size_t t = 1; t <= table.max_offset; ++t) {
        double s = 0.0;
        for (std::size_t l = 1; l < table.n_layers; ++l) s += table.cell(l, t).sps;
        sel.per_offset_mean[t - 1] = s / static_cast<double>(table.n_layers - 1);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < sel.per_offset_mean.size(); ++i) {
        if (sel.per_offset_mean[i] > sel.per_offset_mean[best]) best = i;
    }
    sel.t_star = best + 1;
    sel.band = layer_band(table.n_layers);
    return sel;
}

// ---------------------------------------------------------------------------
// Files

void write_table_csv(const SpsTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "layer,offset,s_within,s_across,sps\n" << std::setprecision(17);
    for (const auto& c : table.cells) {
        out << c.layer << ',' << c.offset << ',' << c.s_within << ',' << c.s_across << ',' << c.sps << '\n';
    }
    if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

SpsTable read_table_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "layer,offset,s_within,s_across,sps") {
        throw std::runtime_error(path.string() + ": unexpected sps header");
    }
    SpsTable table;
    std::size_t line_number = 1;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.empty()) continue;
        std::istringstream ss(line);
        SpsCell c;
        char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
        if (!(ss >> c.layer >> c1 >> c.offset >> c2 >> c.s_within >> c3 >> c.s_across >> c4 >> c.sps) || c1 != ',' ||
            c2 != ',' || c3 != ',' || c4 != ',') {
            throw std::runtime_error(path.string() + ": line " + std::to_string(line_number) + ": malformed row");
        }
        table.n_layers = std::max(table.n_layers, c.layer + 1);
        table.max_offset = std::max(table.max_offset, c.offset);
        table.cells.push_back(c);
    }
    if (table.cells.size() != (table.n_layers - 1) * table.max_offset) {
        throw std::runtime_error(path.string() + ": sps grid is incomplete");
    }
    for (std::size_t i = 0; i < table.cells.size(); ++i) {
        const auto& c = table.cells[i];
        if (c.layer != i / table.max_offset + 1 || c.offset != i % table.max_offset + 1) {
            throw std::runtime_error(path.string() + ": sps rows out of order");
        }
    }
    return table;
}

void write_selection_json(const SpsSelection& selection, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["t_star"] = selection.t_star;
    j["band"] = selection.band;
    j["per_offset_mean"] = selection.per_offset_mean;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

SpsSelection read_selection_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    SpsSelection sel;
    try {
        const auto j = nlohmann::json::parse(in);
        sel.t_star = j.at("t_star").get<std::size_t>();
        sel.band = j.at("band").get<std::vector<std::size_t>>();
        sel.per_offset_mean = j.at("per_offset_mean").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path.string() + ": bad selection file (" + e.what() + ")");
    }
    if (sel.t_star == 0) throw std::runtime_error(path.string() + ": t_star must be >= 1");
    return sel;
}

}  // namespace sglab::sps
