#pragma once

#include <functional>

#include "editshield/autodiff.hpp"
#include "editshield/rng.hpp"
#include "editshield/tensor.hpp"

namespace testsupport {

using editshield::Rng;
using editshield::Tensor;
namespace ad = editshield::ad;

// Wraps an op builder into a smooth scalar loss: sum(op(x) * fixed_weights).
// Avoids FD artifacts from kinked losses like sum(abs(.)).
inline std::function<ad::Var(ad::Graph&, ad::Var)> weighted(
    std::function<ad::Var(ad::Graph&, ad::Var)> op, uint64_t seed = 99) {
    auto cache = std::make_shared<Tensor>();
    return [op = std::move(op), cache, seed](ad::Graph& g, ad::Var v) {
        ad::Var y = op(g, v);
        if (cache->v.empty()) {
            Rng rng(seed);
            *cache = Tensor::randn(g.val(y).shape, rng);
        }
        return g.sum_all(g.mul(y, g.constant(*cache)));
    };
}

// Central-difference check of d(loss)/d(x) for a scalar loss built by `fn`.
// Returns the fraction of coordinates whose relative error is within `tol`.
inline double gradient_agreement(const Tensor& x0,
                                 const std::function<ad::Var(ad::Graph&, ad::Var)>& fn,
                                 double step = 1e-3, double tol = 1e-2, int max_coords = 256,
                                 uint64_t seed = 17) {
    ad::Graph g;
    ad::Var x = g.leaf(x0);
    ad::Var loss = fn(g, x);
    g.backward(loss);
    const Tensor analytic = g.grad(x);

    auto eval = [&](const Tensor& xt) {
        ad::Graph h(false);
        ad::Var xv = h.constant(xt);
        ad::Var l = fn(h, xv);
        return static_cast<double>(h.val(l).v[0]);
    };

    Rng rng(seed);
    const int64_t n = x0.numel();
    const int count = static_cast<int>(std::min<int64_t>(n, max_coords));
    std::vector<int64_t> coords;
    if (n <= max_coords)
        for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    else
        for (int i = 0; i < count; ++i) coords.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(n))));

    int ok = 0;
    for (int64_t c : coords) {
        Tensor xp = x0, xm = x0;
        xp.v[c] += static_cast<float>(step);
        xm.v[c] -= static_cast<float>(step);
        const double fd = (eval(xp) - eval(xm)) / (2.0 * step);
        const double an = analytic.v[c];
        const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-4});
        if (std::fabs(fd - an) / denom <= tol) ++ok;
    }
    return static_cast<double>(ok) / coords.size();
}

}  // namespace testsupport
