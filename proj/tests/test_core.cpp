#include <catch2/catch_amalgamated.hpp>

#include "editshield/autodiff.hpp"
#include "editshield/rng.hpp"
#include "editshield/tensor.hpp"
#include "support/grad_check.hpp"

using namespace editshield;
using testsupport::gradient_agreement;
namespace ad = editshield::ad;

TEST_CASE("rng streams are deterministic and distinct") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    bool differs = false;
    Rng a2(42);
    for (int i = 0; i < 100; ++i) differs |= (a2.next_u64() != c.next_u64());
    REQUIRE(differs);
    REQUIRE(derive_seed(1, "x") != derive_seed(1, "y"));
    REQUIRE(derive_seed(1, "x") == derive_seed(1, "x"));
}

TEST_CASE("rng normal has sane moments") {
    Rng rng(7);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    REQUIRE(std::fabs(s / n) < 0.05);
    REQUIRE(std::fabs(s2 / n - 1.0) < 0.05);
}

TEST_CASE("tensor shape helpers") {
    Tensor t({2, 3});
    t.at(1, 2) = 5.0f;
    REQUIRE(t.numel() == 6);
    REQUIRE(t.v[5] == 5.0f);
    REQUIRE_THROWS_AS(Tensor({2}, {1.0f, 2.0f, 3.0f}), Error);
}

TEST_CASE("gemm matches naive loops") {
    Rng rng(3);
    const int m = 5, k = 7, n = 4;
    Tensor a = Tensor::randn({m, k}, rng), b = Tensor::randn({k, n}, rng);
    Tensor c({m, n});
    ad::Graph::gemm(c.v.data(), a.v.data(), b.v.data(), m, k, n, false, false, false);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0;
            for (int l = 0; l < k; ++l) acc += static_cast<double>(a.at(i, l)) * b.at(l, j);
            REQUIRE(c.at(i, j) == Catch::Approx(acc).margin(1e-4));
        }
}

TEST_CASE("autodiff matches finite differences on pointwise ops") {
    Rng rng(11);
    Tensor x = Tensor::randn({2, 5}, rng);
    // keep values away from the kinks/poles of abs, log, sqrt
    for (auto& v : x.v) v = 0.5f + 0.4f * std::tanh(v);

    auto check = [&](const std::function<ad::Var(ad::Graph&, ad::Var)>& fn) {
        REQUIRE(gradient_agreement(x, fn) >= 0.95);
    };

    check([](ad::Graph& g, ad::Var v) { return g.sum_all(g.silu(v)); });
    check([](ad::Graph& g, ad::Var v) { return g.sum_all(g.sigmoid(v)); });
    check([](ad::Graph& g, ad::Var v) { return g.sum_all(g.exp_(v)); });
    check([](ad::Graph& g, ad::Var v) { return g.sum_all(g.log_(v)); });
    check([](ad::Graph& g, ad::Var v) { return g.sum_all(g.sqrt_(v)); });
    check([](ad::Graph& g, ad::Var v) { return g.sum_all(g.abs(v)); });
    check([](ad::Graph& g, ad::Var v) { return g.mean_all(g.mul(v, v)); });
    check([](ad::Graph& g, ad::Var v) {
        ad::Var two = g.constant(Tensor::scalar(2.0f));
        return g.sum_all(g.div(g.mul(v, v), g.add(g.mul(v, v), two)));
    });
}

TEST_CASE("autodiff matches finite differences on matmul family") {
    Rng rng(12);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b0 = Tensor::randn({4, 5}, rng);

    REQUIRE(gradient_agreement(a, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.matmul(v, g.constant(b0));
            })) >= 0.95);
    REQUIRE(gradient_agreement(b0, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.matmul(g.constant(a), v);
            })) >= 0.95);

    Tensor q = Tensor::randn({2, 3, 4}, rng), kx = Tensor::randn({2, 5, 4}, rng);
    REQUIRE(gradient_agreement(q, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.bmm(v, g.constant(kx), true);
            })) >= 0.95);
    REQUIRE(gradient_agreement(kx, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.bmm(g.constant(q), v, true);
            })) >= 0.95);
    Tensor vx = Tensor::randn({2, 5, 4}, rng);
    REQUIRE(gradient_agreement(vx, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.bmm(g.constant(q), v, false);
            }, 101)) >= 0.95);

    Tensor xw = Tensor::randn({6, 4}, rng), w = Tensor::randn({3, 4}, rng), bias = Tensor::randn({3}, rng);
    REQUIRE(gradient_agreement(xw, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.linear(v, g.constant(w), g.constant(bias));
            })) >= 0.95);
    REQUIRE(gradient_agreement(w, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.linear(g.constant(xw), v, g.constant(bias));
            })) >= 0.95);
}

TEST_CASE("autodiff matches finite differences on conv and resampling") {
    Rng rng(13);
    Tensor x = Tensor::randn({2, 3, 6, 6}, rng);
    Tensor w = Tensor::randn({4, 3, 3, 3}, rng, 0.3f);
    Tensor b = Tensor::randn({4}, rng, 0.1f);

    for (int stride : {1, 2}) {
        REQUIRE(gradient_agreement(x, testsupport::weighted([&, stride](ad::Graph& g, ad::Var v) {
                    return g.conv2d(v, g.constant(w), g.constant(b), stride, 1);
                }, 200 + stride)) >= 0.95);
        REQUIRE(gradient_agreement(w, testsupport::weighted([&, stride](ad::Graph& g, ad::Var v) {
                    return g.conv2d(g.constant(x), v, g.constant(b), stride, 1);
                }, 210 + stride)) >= 0.95);
    }
    REQUIRE(gradient_agreement(b, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.conv2d(g.constant(x), g.constant(w), v, 1, 1);
            })) >= 0.95);
    REQUIRE(gradient_agreement(x, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.upsample_nearest2x(v);
            }, 102)) >= 0.95);
}

TEST_CASE("autodiff matches finite differences on norm, softmax and embedding") {
    Rng rng(14);
    Tensor x = Tensor::randn({2, 4, 3, 3}, rng);
    Tensor gamma = Tensor::randn({4}, rng, 0.5f);
    Tensor beta = Tensor::randn({4}, rng, 0.5f);
    for (auto& v : gamma.v) v += 1.0f;

    REQUIRE(gradient_agreement(x, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.group_norm(v, 2, g.constant(gamma), g.constant(beta));
            })) >= 0.95);
    REQUIRE(gradient_agreement(gamma, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.group_norm(g.constant(x), 2, v, g.constant(beta));
            }, 103)) >= 0.95);

    Tensor logits = Tensor::randn({3, 4, 5}, rng);
    Rng wrng(5);
    Tensor smw = Tensor::randn({3, 4, 5}, wrng);
    REQUIRE(gradient_agreement(logits, [&](ad::Graph& g, ad::Var v) {
                // weighted sum so the softmax gradient is non-trivial
                ad::Var s = g.softmax_last(v);
                return g.sum_all(g.mul(s, g.constant(smw)));
            }) >= 0.95);

    Tensor table = Tensor::randn({7, 3}, rng);
    std::vector<int> ids = {1, 5, 2, 2};
    REQUIRE(gradient_agreement(table, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.embedding(v, ids, {4});
            }, 104)) >= 0.95);

    Tensor x4 = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor cb = Tensor::randn({2, 3}, rng);
    REQUIRE(gradient_agreement(x4, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.add_channel_bias(v, g.constant(cb));
            }, 105)) >= 0.95);
    REQUIRE(gradient_agreement(cb, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.add_channel_bias(g.constant(x4), v);
            }, 106)) >= 0.95);
}

TEST_CASE("autodiff matches finite differences on shape ops") {
    Rng rng(15);
    Tensor x = Tensor::randn({2, 3, 4}, rng);
    REQUIRE(gradient_agreement(x, testsupport::weighted([](ad::Graph& g, ad::Var v) {
                return g.permute(v, {2, 0, 1});
            }, 107)) >= 0.95);
    REQUIRE(gradient_agreement(x, testsupport::weighted([](ad::Graph& g, ad::Var v) {
                return g.reshape(v, {6, 4});
            }, 108)) >= 0.95);

    Tensor a = Tensor::randn({1, 2, 3, 3}, rng), b = Tensor::randn({1, 3, 3, 3}, rng);
    REQUIRE(gradient_agreement(a, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.concat_channels(v, g.constant(b));
            }, 109)) >= 0.95);
    REQUIRE(gradient_agreement(b, testsupport::weighted([&](ad::Graph& g, ad::Var v) {
                return g.slice_channels(g.concat_channels(g.constant(a), v), 1, 5);
            }, 110)) >= 0.95);
}

TEST_CASE("clamp01 passes gradient inside the box and blocks it outside") {
    Tensor x({4}, {-0.5f, 0.25f, 0.75f, 1.5f});
    ad::Graph g;
    ad::Var v = g.leaf(x);
    ad::Var y = g.clamp01(v);
    g.backward(g.sum_all(y));
    const Tensor& gr = g.grad(v);
    REQUIRE(gr.v[0] == 0.0f);
    REQUIRE(gr.v[1] == 1.0f);
    REQUIRE(gr.v[2] == 1.0f);
    REQUIRE(gr.v[3] == 0.0f);
    REQUIRE(g.val(y).v[0] == 0.0f);
    REQUIRE(g.val(y).v[3] == 1.0f);
}

TEST_CASE("permute forward moves elements correctly") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    ad::Graph g;
    ad::Var v = g.constant(x);
    const Tensor& t = g.val(g.permute(v, {1, 0}));
    REQUIRE(t.shape == std::vector<int>{3, 2});
    REQUIRE(t.v == std::vector<float>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(9);
    Tensor x = Tensor::randn({4, 6}, rng, 3.0f);
    ad::Graph g;
    const Tensor& y = g.val(g.softmax_last(g.constant(x)));
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int c = 0; c < 6; ++c) s += y.at(r, c);
        REQUIRE(s == Catch::Approx(1.0).margin(1e-5));
    }
}
