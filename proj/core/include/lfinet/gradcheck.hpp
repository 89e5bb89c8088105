#pragma once

// Central finite-difference gradient checking. The numeric side only ever
// calls the forward pass, so it stays an independent oracle for every
// hand-written backward rule.

#include <functional>
#include <string>
#include <vector>

#include "lfinet/nn.hpp"
#include "lfinet/rng.hpp"
#include "lfinet/tensor.hpp"

namespace lfinet {

struct GradCheckOptions {
    double eps = 1e-6;          // central-difference perturbation
    double tol = 1e-5;          // max relative error
    double abs_floor = 1e-8;    // near-zero gradients pass on absolute error
    index_t max_coords = -1;    // per input; -1 checks every coordinate
    std::uint64_t seed = 1234;  // coordinate subsampling
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    index_t coords_checked = 0;
    bool ok(double tol) const { return max_rel_err < tol; }
};

// Checks d(forward())/d(inputs) against central differences. `forward` must
// rebuild the graph from the current input values and return a scalar.
template <typename T>
GradCheckReport gradcheck(const std::function<Tensor<T>()>& forward,
                          std::vector<Tensor<T>> inputs, const GradCheckOptions& opt = {}) {
    for (auto& in : inputs) in.zero_grad();
    Tensor<T> loss = forward();
    loss.backward();

    GradCheckReport report;
    Rng rng(opt.seed);
    for (auto& in : inputs) {
        std::vector<T> analytic(in.grad().begin(), in.grad().end());
        const index_t n = in.numel();
        std::vector<index_t> coords;
        if (opt.max_coords < 0 || opt.max_coords >= n) {
            coords.resize(static_cast<size_t>(n));
            for (index_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            for (index_t i = 0; i < opt.max_coords; ++i)
                coords.push_back(static_cast<index_t>(rng.below(static_cast<std::uint64_t>(n))));
        }
        auto values = in.data();
        for (index_t c : coords) {
            const T orig = values[static_cast<size_t>(c)];
            double fp, fm;
            {
                NoGradGuard no_grad;
                values[static_cast<size_t>(c)] = orig + static_cast<T>(opt.eps);
                fp = static_cast<double>(forward().item());
                values[static_cast<size_t>(c)] = orig - static_cast<T>(opt.eps);
                fm = static_cast<double>(forward().item());
                values[static_cast<size_t>(c)] = orig;
            }
            const double numeric = (fp - fm) / (2.0 * opt.eps);
            const double a = static_cast<double>(analytic[static_cast<size_t>(c)]);
            const double diff = std::abs(a - numeric);
            if (diff < opt.abs_floor) continue;
            const double rel = diff / std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
            report.max_rel_err = std::max(report.max_rel_err, rel);
        }
        report.coords_checked += static_cast<index_t>(coords.size());
    }
    return report;
}

// Reduces an arbitrary-shaped output to a scalar with fixed pseudo-random
// weights so that every output coordinate influences the probe.
template <typename T>
Tensor<T> probe_loss(const Tensor<T>& out, std::uint64_t seed = 99) {
    Rng rng(seed);
    std::vector<T> w(static_cast<size_t>(out.numel()));
    for (auto& v : w) v = static_cast<T>(rng.uniform(-1.0, 1.0));
    return weighted_sum(out, w);
}

}  // namespace lfinet
