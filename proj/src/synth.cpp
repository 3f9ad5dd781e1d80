#include "sglab/synth.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sglab/random.hpp"

namespace sglab::synth {

using ordered_json = nlohmann::ordered_json;

namespace {

std::size_t rounded_count(std::size_t n, double fraction) {
    return static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
}

// Saturating base^exp, enough to compare against small counts.
std::size_t capacity(std::size_t base, std::size_t exp) {
    std::size_t out = 1;
    for (std::size_t i = 0; i < exp; ++i) {
        if (out > (std::size_t{1} << 40) / std::max<std::size_t>(base, 1)) return std::size_t{1} << 40;
        out *= base;
    }
    return out;
}

TokenSeq random_seq(Rng& rng, Token begin, Token end, std::size_t len) {
    TokenSeq s(len);
    for (auto& t : s) t = static_cast<Token>(begin + rng.below(end - begin));
    return s;
}

// `count` distinct sequences, in draw order.
std::vector<TokenSeq> distinct_seqs(Rng& rng, Token begin, Token end, std::size_t len, std::size_t count) {
    std::vector<TokenSeq> out;
    std::set<TokenSeq> seen;
    while (out.size() < count) {
        TokenSeq s = random_seq(rng, begin, end, len);
        if (seen.insert(s).second) out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

void CorpusSpec::validate() const {
    if (n_keys < 2) throw SpecError("n_keys must be >= 2");
    if (surface_forms < 2) throw SpecError("surface_forms must be >= 2");
    if (!(multi_answer_fraction >= 0.0 && multi_answer_fraction <= 1.0)) {
        throw SpecError("multi_answer_fraction must lie in [0, 1], got " + std::to_string(multi_answer_fraction));
    }
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
        throw SpecError("holdout_fraction must lie in (0, 1), got " + std::to_string(holdout_fraction));
    }
    if (answers_per_multi < 2) throw SpecError("answers_per_multi must be >= 2");
    if (key_token_len == 0 || template_len == 0 || answer_len == 0) {
        throw SpecError("key_token_len, template_len and answer_len must be positive");
    }
    if (!(template_begin > model::kSep && template_begin < key_begin && key_begin < answer_begin &&
          answer_begin < vocab_end)) {
        throw SpecError("vocab partition must satisfy 2 < template_begin < key_begin < answer_begin < vocab_end");
    }
    if (capacity(key_begin - template_begin, 2 * template_len) < surface_forms) {
        throw SpecError("template token range too small for " + std::to_string(surface_forms) + " surface forms");
    }
    if (capacity(answer_begin - key_begin, key_token_len) < n_keys) {
        throw SpecError("key token range too small for " + std::to_string(n_keys) + " distinct keys");
    }
    if (capacity(vocab_end - answer_begin, answer_len) < answers_per_multi) {
        throw SpecError("answer token range too small for " + std::to_string(answers_per_multi) + " answers");
    }
    const std::size_t held = rounded_count(n_keys, holdout_fraction);
    if (held == 0 || held >= n_keys) {
        throw SpecError("holdout_fraction leaves no held-out or no trainable key");
    }
}

Dataset generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    // Global templates: surface form i uses the same prefix/suffix for every key.
    const auto templates =
        distinct_seqs(rng, spec.template_begin, spec.key_begin, 2 * spec.template_len, spec.surface_forms);
    const auto keys = distinct_seqs(rng, spec.key_begin, spec.answer_begin, spec.key_token_len, spec.n_keys);

    std::vector<std::size_t> order(spec.n_keys);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<std::uint8_t> held(spec.n_keys, 0), multi(spec.n_keys, 0);
    rng.shuffle(order.begin(), order.end());
    for (std::size_t i = 0; i < rounded_count(spec.n_keys, spec.holdout_fraction); ++i) held[order[i]] = 1;
    rng.shuffle(order.begin(), order.end());
    for (std::size_t i = 0; i < rounded_count(spec.n_keys, spec.multi_answer_fraction); ++i) multi[order[i]] = 1;

    Dataset out;
    out.reserve(spec.n_keys);
    for (std::size_t k = 0; k < spec.n_keys; ++k) {
        QaItem item;
        item.id = k;
        item.key = k;
        item.held_out = held[k] != 0;
        item.multi_answer = multi[k] != 0;
        for (std::size_t s = 0; s < spec.surface_forms; ++s) {
            const TokenSeq& tpl = templates[s];
            TokenSeq q(tpl.begin(), tpl.begin() + static_cast<std::ptrdiff_t>(spec.template_len));
            q.insert(q.end(), keys[k].begin(), keys[k].end());
            q.insert(q.end(), tpl.begin() + static_cast<std::ptrdiff_t>(spec.template_len), tpl.end());
            q.push_back(model::kSep);
            if (s == 0) {
                item.query = std::move(q);
            } else {
                item.paraphrases.push_back(std::move(q));
            }
        }
        item.answers = distinct_seqs(rng, spec.answer_begin, spec.vocab_end, spec.answer_len,
                                     item.multi_answer ? spec.answers_per_multi : 1);
        out.push_back(std::move(item));
    }
    return out;
}

std::vector<TrainingPair> to_training_pairs(const Dataset& dataset, std::uint64_t epoch_seed) {
    Rng rng(epoch_seed);
    std::vector<TrainingPair> out;
    for (const QaItem& item : dataset) {
        if (item.held_out) continue;
        for (std::size_t s = 0; s < item.variant_count(); ++s) {
            const TokenSeq& q = item.variant(s);
            const std::size_t pick = item.answers.size() > 1 ? rng.below(item.answers.size()) : 0;
            TokenSeq full = q;
            full.insert(full.end(), item.answers[pick].begin(), item.answers[pick].end());
            full.push_back(model::kEos);

            TrainingPair p;
            p.input.assign(full.begin(), full.end() - 1);
            p.target.assign(full.begin() + 1, full.end());
            p.loss_mask.resize(p.target.size());
            for (std::size_t i = 0; i < p.target.size(); ++i) p.loss_mask[i] = (i + 1 >= q.size()) ? 1 : 0;
            out.push_back(std::move(p));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSONL

std::string to_jsonl_line(const QaItem& item) {
    ordered_json j;
    j["id"] = item.id;
    j["key"] = item.key;
    j["split"] = item.split();
    j["held_out"] = item.held_out;
    j["multi_answer"] = item.multi_answer;
    j["query"] = item.query;
    j["paraphrases"] = item.paraphrases;
    j["answers"] = item.answers;
    return j.dump();
}

QaItem parse_jsonl_line(const std::string& line, std::size_t line_number) {
    const std::string where = "line " + std::to_string(line_number) + ": ";
    ordered_json j;
    try {
        j = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ParseError(where + "record is not an object");
    for (const char* field : {"id", "key", "split", "held_out", "multi_answer", "query", "paraphrases", "answers"}) {
        if (!j.contains(field)) throw ParseError(where + "missing field \"" + field + "\"");
    }
    QaItem item;
    try {
        item.id = j.at("id").get<std::uint64_t>();
        item.key = j.at("key").get<std::uint64_t>();
        item.held_out = j.at("held_out").get<bool>();
        item.multi_answer = j.at("multi_answer").get<bool>();
        item.query = j.at("query").get<TokenSeq>();
        item.paraphrases = j.at("paraphrases").get<std::vector<TokenSeq>>();
        item.answers = j.at("answers").get<std::vector<TokenSeq>>();
        const auto split = j.at("split").get<std::string>();
        if (split != "train" && split != "eval") throw ParseError(where + "field \"split\" must be train or eval");
        if (split != item.split()) throw ParseError(where + "field \"split\" disagrees with \"held_out\"");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(where + "bad field type (" + e.what() + ")");
    }
    if (item.query.empty() || item.query.back() != model::kSep) {
        throw ParseError(where + "field \"query\" must end with the sep token");
    }
    if (item.answers.empty()) throw ParseError(where + "field \"answers\" is empty");
    return item;
}

void write_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (const QaItem& item : dataset) out << to_jsonl_line(item) << '\n';
    if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

Dataset read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    Dataset out;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.empty()) continue;
        out.push_back(parse_jsonl_line(line, line_number));
    }
    return out;
}

}  // namespace sglab::synth
