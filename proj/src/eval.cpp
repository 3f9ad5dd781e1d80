#include "sglab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace sglab::eval {

using ordered_json = nlohmann::ordered_json;

int judge_correct(const model::TokenSeq& content, std::span<const model::TokenSeq> answers) {
    return std::find(answers.begin(), answers.end(), content) != answers.end() ? 1 : 0;
}

std::vector<double> midranks(std::span<const double> xs) {
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(xs.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i + 1;
        while (j < order.size() && xs[order[j]] == xs[order[i]]) ++j;
        const double r = static_cast<double>(i + 1 + j) / 2.0;
        for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
        i = j;
    }
    return ranks;
}

double auroc(std::span<const double> uncertainty, std::span<const int> correct) {
    if (uncertainty.size() != correct.size()) throw StatsError("auroc: scores and labels differ in length");
    std::size_t n_correct = 0;
    for (int c : correct) {
        if (c != 0 && c != 1) throw StatsError("auroc: labels must be 0 or 1");
        n_correct += static_cast<std::size_t>(c);
    }
    const std::size_t n_wrong = correct.size() - n_correct;
    if (n_correct == 0 || n_wrong == 0) throw DegenerateLabelsError();
    for (double u : uncertainty) {
        if (!std::isfinite(u)) throw StatsError("auroc: non-finite score");
    }
    const std::vector<double> ranks = midranks(uncertainty);
    double wrong_rank_sum = 0.0;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        if (!correct[i]) wrong_rank_sum += ranks[i];
    }
    const double nw = static_cast<double>(n_wrong);
    const double u_stat = wrong_rank_sum - nw * (nw + 1.0) / 2.0;
    return u_stat / (static_cast<double>(n_correct) * nw);
}

RiskCoverage aurc(std::span<const double> uncertainty, std::span<const int> correct,
                  std::span<const std::uint64_t> ids) {
    const std::size_t n = uncertainty.size();
    if (n == 0) throw StatsError("aurc: no records");
    if (correct.size() != n || (!ids.empty() && ids.size() != n)) {
        throw StatsError("aurc: scores, labels and ids differ in length");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (uncertainty[a] != uncertainty[b]) return uncertainty[a] < uncertainty[b];
        return ids.empty() ? a < b : ids[a] < ids[b];
    });
    RiskCoverage out;
    out.points.reserve(n);
    std::size_t wrong = 0;
    double total = 0.0;
    for (std::size_t k = 1; k <= n; ++k) {
        if (!correct[order[k - 1]]) ++wrong;
        const double risk = static_cast<double>(wrong) / static_cast<double>(k);
        total += risk;
        out.points.emplace_back(static_cast<double>(k) / static_cast<double>(n), risk);
    }
    out.aurc = total / static_cast<double>(n);
    return out;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw StatsError("spearman: inputs differ in length");
    if (xs.size() < 3) throw StatsError("spearman: needs at least 3 points");
    const auto rx = midranks(xs);
    const auto ry = midranks(ys);
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw StatsError("spearman: zero rank variance");
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Score tables

std::vector<double> ScoreTable::column(std::size_t method) const {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.scores.at(method));
    return out;
}

std::size_t ScoreTable::method_index(const std::string& name) const {
    const auto it = std::find(methods.begin(), methods.end(), name);
    if (it == methods.end()) throw std::out_of_range("no score column " + name);
    return static_cast<std::size_t>(it - methods.begin());
}

void write_scores_csv(const ScoreTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "record_id,correct,omega_bar";
    for (const auto& m : table.methods) out << ',' << m;
    out << '\n' << std::setprecision(17);
    for (const auto& r : table.records) {
        out << r.id << ',' << r.correct << ',' << r.omega_bar;
        for (double s : r.scores) out << ',' << s;
        out << '\n';
    }
    if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

namespace {

std::vector<std::string> split_commas(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& where) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty()) throw std::runtime_error(where + ": bad number \"" + s + "\"");
    return v;
}

}  // namespace

ScoreTable read_scores_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty scores file");
    const auto header = split_commas(line);
    if (header.size() < 3 || header[0] != "record_id" || header[1] != "correct" || header[2] != "omega_bar") {
        throw std::runtime_error(path.string() + ": header must start with record_id,correct,omega_bar");
    }
    ScoreTable table;
    table.methods.assign(header.begin() + 3, header.end());
    std::size_t line_number = 1;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.empty()) continue;
        const std::string where = path.string() + ": line " + std::to_string(line_number);
        const auto cells = split_commas(line);
        if (cells.size() != header.size()) throw std::runtime_error(where + ": wrong column count");
        EvalRecord r;
        try {
            r.id = std::stoull(cells[0]);
        } catch (const std::exception&) {
            throw std::runtime_error(where + ": bad record_id");
        }
        if (cells[1] != "0" && cells[1] != "1") throw std::runtime_error(where + ": correct must be 0 or 1");
        r.correct = cells[1] == "1" ? 1 : 0;
        r.omega_bar = parse_double(cells[2], where);
        for (std::size_t i = 3; i < cells.size(); ++i) r.scores.push_back(parse_double(cells[i], where));
        table.records.push_back(std::move(r));
    }
    return table;
}

void attach_split_flags(ScoreTable& table, const synth::Dataset& dataset) {
    std::unordered_map<std::uint64_t, const synth::QaItem*> by_id;
    for (const auto& item : dataset) by_id[item.id] = &item;
    for (auto& r : table.records) {
        const auto it = by_id.find(r.id);
        if (it == by_id.end()) throw std::runtime_error("record " + std::to_string(r.id) + " not in dataset");
        r.held_out = it->second->held_out;
        r.multi_answer = it->second->multi_answer;
    }
}

// ---------------------------------------------------------------------------
// Reports

const MethodSummary& EvalReport::method(const std::string& name) const {
    for (const auto& [m, s] : methods) {
        if (m == name) return s;
    }
    throw std::out_of_range("report has no method " + name);
}

std::optional<double> EvalReport::split_auroc(const std::string& split, const std::string& name) const {
    for (const auto& [s, entries] : splits) {
        if (s != split) continue;
        for (const auto& [m, v] : entries) {
            if (m == name) return v;
        }
    }
    throw std::out_of_range("report has no split entry " + split + "/" + name);
}

std::optional<double> sps_auroc_correlation(const ScoreTable& table, const sps::SpsTable& sps) {
    std::vector<int> labels;
    for (const auto& r : table.records) labels.push_back(r.correct);
    std::vector<double> xs, ys;
    for (const auto& c : sps.cells) {
        const std::string name = "semgrad_l" + std::to_string(c.layer) + "_t" + std::to_string(c.offset);
        const auto it = std::find(table.methods.begin(), table.methods.end(), name);
        if (it == table.methods.end()) continue;
        xs.push_back(c.sps);
        ys.push_back(auroc(table.column(static_cast<std::size_t>(it - table.methods.begin())), labels));
    }
    if (xs.size() < 3) return std::nullopt;
    try {
        return spearman(xs, ys);
    } catch (const StatsError&) {
        return std::nullopt;
    }
}

EvalReport build_report(const ScoreTable& table, const sps::SpsTable* sps, std::size_t excluded, std::uint64_t seed,
                        ordered_json config) {
    if (table.records.empty()) throw StatsError("no records to evaluate");
    EvalReport rep;
    rep.n = table.records.size();
    rep.excluded = excluded;
    rep.seed = seed;
    rep.config = std::move(config);

    std::vector<int> labels;
    std::vector<std::uint64_t> ids;
    for (const auto& r : table.records) {
        labels.push_back(r.correct);
        ids.push_back(r.id);
    }
    for (std::size_t m = 0; m < table.methods.size(); ++m) {
        const auto col = table.column(m);
        MethodSummary s;
        s.auroc = auroc(col, labels);
        auto rc = aurc(col, labels, ids);
        s.aurc = rc.aurc;
        rep.methods.emplace_back(table.methods[m], s);
        rep.risk_coverage[table.methods[m]] = std::move(rc.points);
    }

    for (const char* split : kSplitNames) {
        const std::string name = split;
        auto keep = [&](const EvalRecord& r) {
            if (name == "single_answer") return !r.multi_answer;
            if (name == "multi_answer") return r.multi_answer;
            if (name == "held_out") return r.held_out;
            return true;
        };
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < table.records.size(); ++i) {
            if (keep(table.records[i])) rows.push_back(i);
        }
        std::vector<int> sub_labels;
        for (std::size_t i : rows) sub_labels.push_back(labels[i]);
        const bool both = std::count(sub_labels.begin(), sub_labels.end(), 1) > 0 &&
                          std::count(sub_labels.begin(), sub_labels.end(), 0) > 0;
        std::vector<std::pair<std::string, std::optional<double>>> entries;
        for (std::size_t m = 0; m < table.methods.size(); ++m) {
            if (!both) {
                entries.emplace_back(table.methods[m], std::nullopt);
                continue;
            }
            std::vector<double> sub;
            for (std::size_t i : rows) sub.push_back(table.records[i].scores[m]);
            entries.emplace_back(table.methods[m], auroc(sub, sub_labels));
        }
        rep.splits.emplace_back(name, std::move(entries));
    }
    if (sps) rep.sps_auroc_spearman = sps_auroc_correlation(table, *sps);
    return rep;
}

ordered_json report_to_json(const EvalReport& report) {
    ordered_json j;
    j["n"] = report.n;
    j["excluded"] = report.excluded;
    j["seed"] = report.seed;
    ordered_json methods = ordered_json::object();
    for (const auto& [name, s] : report.methods) methods[name] = {{"auroc", s.auroc}, {"aurc", s.aurc}};
    j["methods"] = methods;
    ordered_json splits = ordered_json::object();
    for (const auto& [split, entries] : report.splits) {
        ordered_json per = ordered_json::object();
        for (const auto& [name, v] : entries) {
            per[name] = {{"auroc", v ? ordered_json(*v) : ordered_json(nullptr)}};
        }
        splits[split] = per;
    }
    j["splits"] = splits;
    j["sps_auroc_spearman"] = report.sps_auroc_spearman ? ordered_json(*report.sps_auroc_spearman) : ordered_json();
    j["config"] = report.config;
    return j;
}

EvalReport report_from_json(const ordered_json& j) {
    EvalReport rep;
    try {
        rep.n = j.at("n").get<std::size_t>();
        rep.excluded = j.at("excluded").get<std::size_t>();
        rep.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& [name, v] : j.at("methods").items()) {
            rep.methods.emplace_back(name, MethodSummary{v.at("auroc").get<double>(), v.at("aurc").get<double>()});
        }
        for (const auto& [split, per] : j.at("splits").items()) {
            std::vector<std::pair<std::string, std::optional<double>>> entries;
            for (const auto& [name, v] : per.items()) {
                const auto& a = v.at("auroc");
                entries.emplace_back(name, a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
            }
            rep.splits.emplace_back(split, std::move(entries));
        }
        const auto& s = j.at("sps_auroc_spearman");
        if (!s.is_null()) rep.sps_auroc_spearman = s.get<double>();
        rep.config = j.at("config");
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("bad report (") + e.what() + ")");
    }
    return rep;
}

void emit_report(const EvalReport& report, const std::filesystem::path& json_path,
                 const std::filesystem::path& csv_path) {
    {
        std::ofstream out(json_path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + json_path.string() + " for writing");
        out << report_to_json(report).dump(2) << '\n';
        if (!out) throw std::runtime_error("write to " + json_path.string() + " failed");
    }
    std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + csv_path.string() + " for writing");
    out << "method,coverage,risk\n" << std::setprecision(17);
    for (const auto& [name, s] : report.methods) {
        for (const auto& [cov, risk] : report.risk_coverage.at(name)) out << name << ',' << cov << ',' << risk << '\n';
    }
    if (!out) throw std::runtime_error("write to " + csv_path.string() + " failed");
}

EvalReport read_report(const std::filesystem::path& json_path) {
    std::ifstream in(json_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + json_path.string());
    ordered_json j;
    try {
        j = ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(json_path.string() + ": malformed JSON (" + e.what() + ")");
    }
    return report_from_json(j);
}

}  // namespace sglab::eval
