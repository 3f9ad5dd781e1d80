#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "sglab/synth.hpp"
#include "test_util.hpp"

using namespace sglab;
using namespace sglab::synth;
using sglab::testing::read_bytes;
using sglab::testing::TempDir;

namespace {

CorpusSpec small_spec(std::uint64_t seed) {
    CorpusSpec s;
    s.n_keys = 40;
    s.surface_forms = 4;
    s.multi_answer_fraction = 0.25;
    s.answers_per_multi = 3;
    s.holdout_fraction = 0.25;
    s.seed = seed;
    return s;
}

}  // namespace

TEST(Synth, FourKeysQuarterHoldoutGivesOneHeldOutKey) {
    CorpusSpec s;
    s.n_keys = 4;
    s.holdout_fraction = 0.25;
    s.seed = 3;
    const Dataset ds = generate_corpus(s);
    ASSERT_EQ(ds.size(), 4u);
    int held = 0;
    for (const auto& it : ds) held += it.held_out;
    EXPECT_EQ(held, 1);
}

TEST(Synth, CountsFollowRounding) {
    CorpusSpec s;  // defaults: 512 keys, 0.2 multi, 0.25 holdout
    s.seed = 11;
    const Dataset ds = generate_corpus(s);
    ASSERT_EQ(ds.size(), 512u);
    std::size_t held = 0, multi = 0;
    for (const auto& it : ds) {
        held += it.held_out;
        multi += it.multi_answer;
    }
    EXPECT_EQ(held, 128u);
    EXPECT_EQ(multi, static_cast<std::size_t>(std::lround(512 * 0.2)));
}

TEST(Synth, QueryLayoutAndTokenRanges) {
    const CorpusSpec s = small_spec(5);
    const Dataset ds = generate_corpus(s);
    std::set<std::uint64_t> keys;
    for (const auto& it : ds) {
        keys.insert(it.key);
        ASSERT_EQ(it.variant_count(), s.surface_forms);
        const auto key_span = [&](const TokenSeq& q) {
            return TokenSeq(q.begin() + static_cast<std::ptrdiff_t>(s.template_len),
                            q.begin() + static_cast<std::ptrdiff_t>(s.template_len + s.key_token_len));
        };
        for (std::size_t v = 0; v < it.variant_count(); ++v) {
            const TokenSeq& q = it.variant(v);
            ASSERT_EQ(q.size(), s.query_len());
            EXPECT_EQ(q.back(), model::kSep);
            EXPECT_EQ(key_span(q), key_span(it.query));
            for (std::size_t i = 0; i + 1 < q.size(); ++i) {
                const bool in_key = i >= s.template_len && i < s.template_len + s.key_token_len;
                if (in_key) {
                    EXPECT_GE(q[i], s.key_begin);
                    EXPECT_LT(q[i], s.answer_begin);
                } else {
                    EXPECT_GE(q[i], s.template_begin);
                    EXPECT_LT(q[i], s.key_begin);
                }
            }
        }
        // Surface forms are distinct from each other.
        std::set<TokenSeq> forms;
        for (std::size_t v = 0; v < it.variant_count(); ++v) forms.insert(it.variant(v));
        EXPECT_EQ(forms.size(), it.variant_count());

        ASSERT_EQ(it.answers.size(), it.multi_answer ? s.answers_per_multi : 1u);
        std::set<TokenSeq> distinct(it.answers.begin(), it.answers.end());
        EXPECT_EQ(distinct.size(), it.answers.size());
        for (const auto& a : it.answers) {
            ASSERT_EQ(a.size(), s.answer_len);
            for (auto t : a) {
                EXPECT_GE(t, s.answer_begin);
                EXPECT_LT(t, s.vocab_end);
            }
        }
    }
    EXPECT_EQ(keys.size(), ds.size());
}

TEST(Synth, InvalidSpecsAreRejected) {
    CorpusSpec s = small_spec(1);
    s.holdout_fraction = 1.5;
    EXPECT_THROW(generate_corpus(s), SpecError);
    s = small_spec(1);
    s.multi_answer_fraction = -0.1;
    EXPECT_THROW(generate_corpus(s), SpecError);
    s = small_spec(1);
    s.surface_forms = 1;
    EXPECT_THROW(generate_corpus(s), SpecError);
    s = small_spec(1);
    s.answers_per_multi = 1;
    EXPECT_THROW(generate_corpus(s), SpecError);
    s = small_spec(1);
    s.template_begin = 2;
    EXPECT_THROW(generate_corpus(s), SpecError);
    s = small_spec(1);
    s.key_begin = 40;
    s.answer_begin = 42;  // 2 tokens cannot form 40 distinct 2-token keys
    EXPECT_THROW(generate_corpus(s), SpecError);
}

TEST(Synth, HeldOutKeysContributeNoPairs) {
    const Dataset ds = generate_corpus(small_spec(9));
    const auto pairs = to_training_pairs(ds, 1);
    std::size_t trainable = 0;
    for (const auto& it : ds) {
        if (it.held_out) continue;
        trainable += it.variant_count();
    }
    EXPECT_EQ(pairs.size(), trainable);
    std::set<TokenSeq> held_queries;
    for (const auto& it : ds)
        if (it.held_out)
            for (std::size_t v = 0; v < it.variant_count(); ++v) held_queries.insert(it.variant(v));
    const std::size_t qlen = small_spec(9).query_len();
    for (const auto& p : pairs) {
        const TokenSeq q(p.input.begin(), p.input.begin() + static_cast<std::ptrdiff_t>(qlen));
        EXPECT_EQ(held_queries.count(q), 0u);
    }
}

TEST(Synth, PairShapeAndMask) {
    const CorpusSpec s = small_spec(2);
    const Dataset ds = generate_corpus(s);
    const auto pairs = to_training_pairs(ds, 4);
    for (const auto& p : pairs) {
        ASSERT_EQ(p.input.size(), s.query_len() + s.answer_len);
        ASSERT_EQ(p.target.size(), p.input.size());
        ASSERT_EQ(p.loss_mask.size(), p.input.size());
        for (std::size_t i = 0; i + 1 < p.input.size(); ++i) EXPECT_EQ(p.target[i], p.input[i + 1]);
        EXPECT_EQ(p.target.back(), model::kEos);
        for (std::size_t i = 0; i < p.input.size(); ++i)
            EXPECT_EQ(p.loss_mask[i], i + 1 >= s.query_len() ? 1 : 0) << i;
        for (auto t : p.input) EXPECT_NE(t, model::kPad);
    }
}

TEST(Synth, SingleAnswerTargetIsStableAcrossEpochs) {
    const Dataset ds = generate_corpus(small_spec(3));
    const auto a = to_training_pairs(ds, 1);
    const auto b = to_training_pairs(ds, 2);
    ASSERT_EQ(a.size(), b.size());
    std::size_t k = 0;
    for (const auto& it : ds) {
        if (it.held_out) continue;
        for (std::size_t v = 0; v < it.variant_count(); ++v, ++k) {
            if (!it.multi_answer) {
                EXPECT_EQ(a[k].target, b[k].target);
            }
        }
    }
}

TEST(Synth, TwoAnswerFrequencyIsBinomial) {
    CorpusSpec s = small_spec(21);
    s.answers_per_multi = 2;
    s.multi_answer_fraction = 0.5;
    const Dataset ds = generate_corpus(s);
    const std::size_t epochs = 2000;
    std::vector<std::size_t> multi_pairs;
    std::size_t k = 0;
    for (const auto& it : ds) {
        if (it.held_out) continue;
        for (std::size_t v = 0; v < it.variant_count(); ++v, ++k)
            if (it.multi_answer) multi_pairs.push_back(k);
    }
    ASSERT_FALSE(multi_pairs.empty());
    const std::size_t qlen = s.query_len();
    std::vector<std::size_t> first_count(multi_pairs.size(), 0);
    std::vector<TokenSeq> first_answer(multi_pairs.size());
    for (std::size_t e = 0; e < epochs; ++e) {
        const auto pairs = to_training_pairs(ds, 1000 + e);
        for (std::size_t i = 0; i < multi_pairs.size(); ++i) {
            const auto& in = pairs[multi_pairs[i]].input;
            const TokenSeq ans(in.begin() + static_cast<std::ptrdiff_t>(qlen), in.end());
            if (e == 0) first_answer[i] = ans;
            first_count[i] += ans == first_answer[i];
        }
    }
    // Per pair: frequency of one answer is 0.5 within 3 sigma of Binomial(epochs, 0.5).
    const double sigma = std::sqrt(epochs * 0.25);
    std::size_t outside = 0;
    for (auto c : first_count)
        if (std::abs(static_cast<double>(c) - epochs / 2.0) > 3 * sigma + 1) ++outside;
    // 3 sigma bounds allow ~0.3% misses; pooled frequency must also be tight.
    EXPECT_LE(outside, 1u);
    double pooled = 0;
    for (auto c : first_count) pooled += static_cast<double>(c);
    const double n = static_cast<double>(epochs * first_count.size());
    EXPECT_NEAR(pooled / n, 0.5, 3 * std::sqrt(0.25 / n) + 1.0 / epochs);
}

TEST(Synth, JsonlRoundTripAndCardinality) {
    TempDir dir("synth_rt");
    const Dataset ds = generate_corpus(small_spec(8));
    write_jsonl(ds, dir / "d.jsonl");
    const Dataset back = read_jsonl(dir / "d.jsonl");
    EXPECT_EQ(back, ds);

    Dataset three(ds.begin(), ds.begin() + 3);
    write_jsonl(three, dir / "three.jsonl");
    EXPECT_EQ(read_jsonl(dir / "three.jsonl").size(), 3u);

    const std::string text = read_bytes(dir / "three.jsonl");
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
    EXPECT_EQ(text.find('\r'), std::string::npos);
}

TEST(Synth, JsonlLineSchema) {
    const Dataset ds = generate_corpus(small_spec(8));
    const auto j = nlohmann::json::parse(to_jsonl_line(ds.front()));
    for (const char* f : {"id", "key", "split", "held_out", "multi_answer", "query", "paraphrases", "answers"})
        EXPECT_TRUE(j.contains(f)) << f;
    EXPECT_EQ(j["split"], ds.front().split());
}

TEST(Synth, MissingAnswersNamesFieldAndLine) {
    TempDir dir("synth_bad");
    const Dataset ds = generate_corpus(small_spec(8));
    auto j = nlohmann::json::parse(to_jsonl_line(ds[1]));
    j.erase("answers");
    {
        std::ofstream out(dir / "bad.jsonl", std::ios::binary);
        out << to_jsonl_line(ds[0]) << "\n" << j.dump() << "\n";
    }
    try {
        read_jsonl(dir / "bad.jsonl");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("missing field \"answers\""), std::string::npos) << msg;
        EXPECT_NE(msg.find("2"), std::string::npos) << msg;
    }
    EXPECT_THROW(parse_jsonl_line("{not json", 1), ParseError);
}

TEST(Synth, RegenerationIsByteIdentical) {
    TempDir dir("synth_det");
    write_jsonl(generate_corpus(small_spec(77)), dir / "a.jsonl");
    write_jsonl(generate_corpus(small_spec(77)), dir / "b.jsonl");
    EXPECT_EQ(read_bytes(dir / "a.jsonl"), read_bytes(dir / "b.jsonl"));
    write_jsonl(generate_corpus(small_spec(78)), dir / "c.jsonl");
    EXPECT_NE(read_bytes(dir / "a.jsonl"), read_bytes(dir / "c.jsonl"));
}
