#pragma once

// Synthetic key -> answer QA corpus. Every key has K_s surface forms that
// differ only in the template tokens around the key span, so paraphrases are
// semantically equivalent by construction.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "sglab/model.hpp"

namespace sglab::synth {

using model::Token;
using model::TokenSeq;

class SpecError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Token ranges are half-open: templates [template_begin, key_begin),
/// keys [key_begin, answer_begin), answers [answer_begin, vocab_end).
struct CorpusSpec {
    std::size_t n_keys = 512;
    std::size_t surface_forms = 6;
    double multi_answer_fraction = 0.2;
    std::size_t answers_per_multi = 3;
    double holdout_fraction = 0.25;
    std::size_t key_token_len = 2;
    std::size_t template_len = 2;  // tokens before and after the key span
    std::size_t answer_len = 2;
    Token template_begin = 3;
    Token key_begin = 40;
    Token answer_begin = 136;
    Token vocab_end = 256;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t query_len() const { return 2 * template_len + key_token_len + 1; }
};

struct QaItem {
    std::uint64_t id = 0;
    std::uint64_t key = 0;
    bool held_out = false;
    bool multi_answer = false;
    TokenSeq query;                    // surface form 0
    std::vector<TokenSeq> paraphrases;  // surface forms 1..K_s-1
    std::vector<TokenSeq> answers;

    /// "eval" for held-out keys, "train" otherwise.
    std::string split() const { return held_out ? "eval" : "train"; }
    /// Surface form `i`, 0 being the original query.
    const TokenSeq& variant(std::size_t i) const { return i == 0 ? query : paraphrases.at(i - 1); }
    std::size_t variant_count() const { return 1 + paraphrases.size(); }

    bool operator==(const QaItem&) const = default;
};

using Dataset = std::vector<QaItem>;

Dataset generate_corpus(const CorpusSpec& spec);

struct TrainingPair {
    TokenSeq input;                  // query + answer
    TokenSeq target;                 // input shifted left by one, ending in eos
    std::vector<std::uint8_t> loss_mask;  // 1 on answer and eos targets
};

/// One pair per (non-held-out item, surface form). Multi-answer keys draw
/// their answer uniformly, seeded by `epoch_seed`.
std::vector<TrainingPair> to_training_pairs(const Dataset& dataset, std::uint64_t epoch_seed);

void write_jsonl(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_jsonl(const std::filesystem::path& path);

std::string to_jsonl_line(const QaItem& item);
QaItem parse_jsonl_line(const std::string& line, std::size_t line_number);

}  // namespace sglab::synth
