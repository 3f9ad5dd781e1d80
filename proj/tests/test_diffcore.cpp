#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sglab/diffcore.hpp"
#include "test_util.hpp"

using namespace sglab;
using namespace sglab::diffcore;
using sglab::testing::random_values;

TEST(DiffcoreForward, MatmulShapeAndValues) {
    Graph g;
    const NodeId a = g.leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    const NodeId b = g.leaf({3, 2}, {7, 8, 9, 10, 11, 12});
    const NodeId c = g.matmul(a, b);
    EXPECT_EQ(g.node(c).shape, (Shape{2, 2}));
    const auto v = g.values(c);
    EXPECT_DOUBLE_EQ(v[0], 58);
    EXPECT_DOUBLE_EQ(v[1], 64);
    EXPECT_DOUBLE_EQ(v[2], 139);
    EXPECT_DOUBLE_EQ(v[3], 154);
}

TEST(DiffcoreForward, MatmulTransposedRhsMatchesExplicitTranspose) {
    Graph g;
    const NodeId a = g.leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    const NodeId bt = g.leaf({2, 3}, {7, 9, 11, 8, 10, 12});
    const auto v = g.values(g.matmul(a, bt, true));
    EXPECT_DOUBLE_EQ(v[0], 58);
    EXPECT_DOUBLE_EQ(v[3], 154);
}

TEST(DiffcoreForward, SoftmaxUniformRow) {
    Graph g;
    const auto v = g.values(g.softmax_row(g.leaf({1, 4}, {0, 0, 0, 0})));
    for (double p : v) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(DiffcoreForward, SoftmaxTwoEntries) {
    Graph g;
    const auto v = g.values(g.softmax_row(g.leaf({1, 2}, {0.0, std::log(3.0)})));
    // exp(0) / (exp(0) + 3) and 3 / (1 + 3)
    EXPECT_NEAR(v[0], 1.0 / (1.0 + 3.0), 1e-15);
    EXPECT_NEAR(v[1], 3.0 / (1.0 + 3.0), 1e-15);
}

TEST(DiffcoreForward, SoftmaxRowsSumToOneAndShiftInvariant) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_values(rng, 5 * 7, 3.0);
        auto shifted = x;
        const double c = 10.0 * rng.normal();
        for (double& s : shifted) s += c;
        Graph g;
        const auto p = g.values(g.softmax_row(g.leaf({5, 7}, x)));
        const auto q = g.values(g.softmax_row(g.leaf({5, 7}, shifted)));
        for (std::size_t r = 0; r < 5; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < 7; ++j) s += p[r * 7 + j];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
        for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
    }
}

TEST(DiffcoreForward, ShapeMismatchNamesOpAndShapes) {
    Graph g;
    const NodeId a = g.leaf({2, 3}, std::vector<double>(6, 1.0));
    const NodeId b = g.leaf({2, 3}, std::vector<double>(6, 1.0));
    try {
        g.matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

TEST(DiffcoreForward, LogOfNonPositiveIsDomainError) {
    Graph g;
    EXPECT_THROW(g.log(g.leaf({2}, {1.0, 0.0})), DomainError);
    EXPECT_THROW(g.log(g.leaf({1}, {-2.0})), DomainError);
}

TEST(DiffcoreBackward, SquareAtThree) {
    Graph g;
    const NodeId x = g.leaf({1}, {3.0});
    const NodeId y = g.sum(g.mul(x, x));
    const auto gm = g.backward(y, {x});
    EXPECT_DOUBLE_EQ(gm.at(x)[0], 6.0);
}

TEST(DiffcoreBackward, RootGradientIsOne) {
    Graph g;
    const NodeId x = g.leaf({1}, {3.0});
    const NodeId y = g.sum(g.mul(x, x));
    const auto gm = g.backward(y, {y});
    EXPECT_EQ(gm.at(y)[0], 1.0);
}

TEST(DiffcoreBackward, DetachedFactorActsAsConstant) {
    Graph g;
    const NodeId a = g.leaf({2}, {2.0, 5.0});
    const NodeId root = g.sum(g.mul(g.detach(a), a));
    const auto gm = g.backward(root, {a});
    EXPECT_EQ(gm.at(a)[0], 2.0);
    EXPECT_EQ(gm.at(a)[1], 5.0);
}

TEST(DiffcoreBackward, DetachBlocksOneFactor) {
    Graph g;
    const NodeId x = g.leaf({3}, {1.5, -2.0, 0.5});
    const NodeId y = g.leaf({3}, {4.0, 3.0, -1.0});
    const NodeId root = g.sum(g.mul(g.detach(x), y));
    const auto gm = g.backward(root, {x, y});
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(gm.at(x)[i], 0.0);
        EXPECT_EQ(gm.at(y)[i], g.values(x)[i]);
    }
}

TEST(DiffcoreBackward, DetachIsIdempotentOnValues) {
    Graph g;
    const NodeId x = g.leaf({2, 2}, {1, 2, 3, 4});
    const NodeId dd = g.detach(g.detach(x));
    EXPECT_TRUE(g.node(dd).detached);
    const auto a = g.values(x);
    const auto b = g.values(dd);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(DiffcoreBackward, DetachAnnihilatesAllAncestors) {
    Rng rng(5);
    Graph g;
    const NodeId x = g.leaf({2, 3}, random_values(rng, 6));
    const NodeId w = g.leaf({3, 3}, random_values(rng, 9));
    const NodeId inner = g.silu(g.matmul(x, w));
    const NodeId root = g.sum(g.mul(g.detach(inner), g.leaf({2, 3}, random_values(rng, 6))));
    const auto gm = g.backward(root, {x, w, inner});
    for (double v : gm.at(x)) EXPECT_EQ(v, 0.0);
    for (double v : gm.at(w)) EXPECT_EQ(v, 0.0);
    for (double v : gm.at(inner)) EXPECT_EQ(v, 0.0);
}

TEST(DiffcoreBackward, NodesOutsideAncestryGetZero) {
    Graph g;
    const NodeId x = g.leaf({2}, {1.0, 2.0});
    const NodeId unrelated = g.leaf({3}, {1.0, 2.0, 3.0});
    const NodeId root = g.sum(g.mul(x, x));
    const auto gm = g.backward(root, {unrelated});
    ASSERT_TRUE(gm.contains(unrelated));
    EXPECT_EQ(gm.shape(unrelated), (Shape{3}));
    for (double v : gm.at(unrelated)) EXPECT_EQ(v, 0.0);
}

TEST(DiffcoreBackward, Errors) {
    Graph g;
    const NodeId x = g.leaf({2}, {1.0, 2.0});
    EXPECT_THROW(g.backward(x, {x}), GraphError);
    const NodeId root = g.sum(x);
    EXPECT_THROW(g.backward(root, {NodeId{999}}), GraphError);
}

TEST(DiffcoreBackward, CountsCalls) {
    Graph g;
    const NodeId x = g.leaf({1}, {1.0});
    const NodeId root = g.sum(g.exp(x));
    EXPECT_EQ(g.backward_calls(), 0u);
    g.backward(root, {x});
    g.backward(root, {x});
    EXPECT_EQ(g.backward_calls(), 2u);
}

namespace {

// A smooth graph of random depth built from every differentiable primitive.
struct RandomGraph {
    std::size_t depth;
    std::uint64_t seed;

    NodeId build(Graph& g, NodeId x) const {
        Rng rng(seed);
        const std::vector<double> w1 = random_values(rng, 4 * 4, 0.5);
        const std::vector<double> gain = random_values(rng, 4, 0.5);
        const std::vector<double> mix = random_values(rng, 3 * 4, 0.5);
        NodeId h = x;  // [3 x 4]
        for (std::size_t layer = 0; layer < depth; ++layer) {
            switch ((seed + layer) % 6) {
                case 0: h = g.silu(g.matmul(h, g.leaf({4, 4}, w1, false))); break;
                case 1: h = g.rms_norm(h, g.leaf({4}, gain, false)); break;
                case 2: h = g.add(h, g.scale(g.exp(g.scale(h, 0.3)), 0.5)); break;
                case 3: h = g.mul(h, g.leaf({3, 4}, mix, false)); break;
                case 4: {
                    const NodeId left = g.slice(h, 1, 0, 2);
                    const NodeId right = g.slice(h, 1, 2, 4);
                    const NodeId parts[] = {right, g.sub(left, right)};
                    h = g.concat(parts, 1);
                    break;
                }
                case 5: {
                    const NodeId p = g.softmax_row(h);
                    h = g.add(h, g.log(g.softmax_row(p)));
                    break;
                }
            }
        }
        const NodeId probs = g.softmax_row(h);
        return g.sum(g.add(g.scale(g.entropy_row(probs), 0.7), g.log(g.pick(probs, {0, 2, 3}))));
    }
};

GradFunction as_function(const RandomGraph& rg) {
    return [rg](std::span<const double> point, std::vector<double>* grad) {
        Graph g;
        const NodeId x = g.leaf({3, 4}, std::vector<double>(point.begin(), point.end()));
        const NodeId root = rg.build(g, x);
        if (grad) {
            const auto gm = g.backward(root, {x});
            grad->assign(gm.at(x).begin(), gm.at(x).end());
        }
        return g.values(root)[0];
    };
}

}  // namespace

TEST(DiffcoreBackward, MatchesFiniteDifferencesOnRandomGraphs) {
    Rng rng(2024);
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const RandomGraph rg{1 + seed % 6, seed};
        const auto point = random_values(rng, 12);
        EXPECT_LT(finite_diff_check(as_function(rg), point, 1e-5), 1e-5) << "seed " << seed;
    }
}

TEST(DiffcoreBackward, ThreeLayerCompositionMatchesFiniteDifferences) {
    Rng rng(3);
    const auto w1 = random_values(rng, 4 * 5, 0.7);
    const auto w2 = random_values(rng, 5 * 3, 0.7);
    GradFunction f = [&](std::span<const double> point, std::vector<double>* grad) {
        Graph g;
        const NodeId x = g.leaf({2, 4}, std::vector<double>(point.begin(), point.end()));
        const NodeId h1 = g.silu(g.matmul(x, g.leaf({4, 5}, w1, false)));
        const NodeId h2 = g.matmul(h1, g.leaf({5, 3}, w2, false));
        const NodeId root = g.sum(g.log(g.pick(g.softmax_row(h2), {1, 2})));
        if (grad) {
            const auto gm = g.backward(root, {x});
            grad->assign(gm.at(x).begin(), gm.at(x).end());
        }
        return g.values(root)[0];
    };
    EXPECT_LT(finite_diff_check(f, random_values(rng, 8), 1e-5), 1e-5);
}

TEST(DiffcoreBackward, Linearity) {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const auto xv = random_values(rng, 12);
        const double a = rng.normal(), b = rng.normal();
        const RandomGraph f{3, static_cast<std::uint64_t>(trial)}, h{4, static_cast<std::uint64_t>(trial + 100)};

        Graph g;
        const NodeId x = g.leaf({3, 4}, xv);
        const NodeId fr = f.build(g, x);
        const NodeId hr = h.build(g, x);
        const NodeId combo = g.add(g.scale(fr, a), g.scale(hr, b));
        const auto gc = g.backward(combo, {x});
        const auto gf = g.backward(fr, {x});
        const auto gh = g.backward(hr, {x});
        for (std::size_t i = 0; i < 12; ++i) {
            EXPECT_NEAR(gc.at(x)[i], a * gf.at(x)[i] + b * gh.at(x)[i], 1e-12);
        }
    }
}

TEST(DiffcoreBackward, DetachedEntropyWeightsEqualLiteralWeights) {
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        const auto logits = random_values(rng, 3 * 6, 2.0);
        const std::vector<std::size_t> chosen = {1, 4, 0};

        Graph g1;
        const NodeId z1 = g1.leaf({3, 6}, logits);
        const NodeId p1 = g1.softmax_row(z1);
        const NodeId w1 = g1.detach(g1.entropy_row(p1));
        const NodeId r1 = g1.sum(g1.mul(w1, g1.log(g1.pick(p1, chosen))));
        const auto grad1 = g1.backward(r1, {z1});

        // Same objective with each weight written in as a scale constant.
        Graph g2;
        const NodeId z2 = g2.leaf({3, 6}, logits);
        const NodeId p2 = g2.softmax_row(z2);
        const NodeId lp = g2.log(g2.pick(p2, chosen));
        const auto w = g1.values(w1);
        NodeId r2 = 0;
        for (std::size_t t = 0; t < 3; ++t) {
            const NodeId term = g2.scale(g2.slice(lp, 0, t, t + 1), w[t]);
            r2 = t == 0 ? term : g2.add(r2, term);
        }
        const auto grad2 = g2.backward(g2.sum(r2), {z2});
        for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_NEAR(grad1.at(z1)[i], grad2.at(z2)[i], 1e-12);
    }
}

TEST(DiffcoreBackward, EmbeddingLookupAccumulatesRepeatedRows) {
    Graph g;
    const NodeId table = g.leaf({3, 2}, {1, 2, 3, 4, 5, 6});
    const NodeId rows = g.embedding_lookup(table, {2, 0, 2});
    const auto gm = g.backward(g.sum(rows), {table});
    const std::vector<double> expect = {1, 1, 0, 0, 2, 2};
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(gm.at(table)[i], expect[i]);
}

TEST(DiffcoreBackward, MaskedFillBlocksMaskedEntries) {
    Graph g;
    const NodeId x = g.leaf({1, 3}, {1, 2, 3});
    const NodeId y = g.masked_fill(x, {0, 1, 0}, -5.0);
    EXPECT_EQ(g.values(y)[1], -5.0);
    const auto gm = g.backward(g.sum(y), {x});
    EXPECT_EQ(gm.at(x)[0], 1.0);
    EXPECT_EQ(gm.at(x)[1], 0.0);
    EXPECT_EQ(gm.at(x)[2], 1.0);
}

TEST(DiffcoreBackward, RmsNormGainMatchesFiniteDifferences) {
    Rng rng(99);
    const auto xv = random_values(rng, 2 * 5);
    GradFunction f = [&](std::span<const double> gain, std::vector<double>* grad) {
        Graph g;
        const NodeId x = g.leaf({2, 5}, xv);
        const NodeId gn = g.leaf({5}, std::vector<double>(gain.begin(), gain.end()));
        const NodeId root = g.sum(g.exp(g.rms_norm(x, gn)));
        if (grad) {
            const auto gm = g.backward(root, {gn});
            grad->assign(gm.at(gn).begin(), gm.at(gn).end());
        }
        return g.values(root)[0];
    };
    EXPECT_LT(finite_diff_check(f, random_values(rng, 5), 1e-5), 1e-5);
}

TEST(DiffcoreEntropy, UniformOneHotAndHandValue) {
    EXPECT_NEAR(entropy_of_row(std::vector<double>(8, 0.125)), std::log(8.0), 1e-15);
    EXPECT_NEAR(std::log(8.0), 2.0794415, 1e-7);
    EXPECT_EQ(entropy_of_row(std::vector<double>{0.0, 1.0, 0.0}), 0.0);
    const double expect = -(0.25 * std::log(0.25) + 0.75 * std::log(0.75));
    EXPECT_NEAR(entropy_of_row(std::vector<double>{0.25, 0.75}), expect, 1e-15);
    EXPECT_NEAR(expect, 0.5623351, 1e-7);
}

TEST(DiffcoreEntropy, RejectsUnnormalizedRowWithSum) {
    try {
        entropy_of_row(std::vector<double>{0.5, 0.7});
        FAIL() << "expected DomainError";
    } catch (const DomainError& e) {
        EXPECT_NE(std::string(e.what()).find("1.2"), std::string::npos) << e.what();
    }
}

TEST(DiffcoreEntropy, BoundedAndPermutationInvariant) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> p(9);
        double s = 0.0;
        for (double& x : p) s += (x = rng.uniform());
        for (double& x : p) x /= s;
        const double h = entropy_of_row(p);
        EXPECT_GE(h, 0.0);
        EXPECT_LE(h, std::log(9.0) + 1e-15);
        auto q = p;
        rng.shuffle(q.begin(), q.end());
        EXPECT_NEAR(entropy_of_row(q), h, 1e-14);
    }
}

TEST(DiffcoreFiniteDiff, LinearFunctionIsExact) {
    const std::vector<double> c = {1.5, -2.0, 0.25};
    GradFunction f = [&](std::span<const double> x, std::vector<double>* grad) {
        if (grad) *grad = c;
        return c[0] * x[0] + c[1] * x[1] + c[2] * x[2];
    };
    EXPECT_LT(finite_diff_check(f, std::vector<double>{0.3, 0.1, -0.7}, 1e-5), 1e-9);
}

TEST(DiffcoreFiniteDiff, ExpAtZero) {
    GradFunction f = [](std::span<const double> x, std::vector<double>* grad) {
        Graph g;
        const NodeId n = g.leaf({1}, {x[0]});
        const NodeId r = g.sum(g.exp(n));
        if (grad) {
            const auto gm = g.backward(r, {n});
            grad->assign(gm.at(n).begin(), gm.at(n).end());
        }
        return g.values(r)[0];
    };
    EXPECT_LT(finite_diff_check(f, std::vector<double>{0.0}, 1e-5), 1e-8);
}

TEST(DiffcoreFiniteDiff, DetectsAWrongGradient) {
    GradFunction f = [](std::span<const double> x, std::vector<double>* grad) {
        if (grad) *grad = {3.0 * x[0]};
        return x[0] * x[0];
    };
    EXPECT_GT(finite_diff_check(f, std::vector<double>{2.0}, 1e-5), 0.1);
}
