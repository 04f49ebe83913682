#pragma once

// Central-difference gradient verification. The caller supplies a loss
// functional that evaluates the scalar loss from the current parameter
// values; the checker perturbs every coordinate (or a sampled subset),
// compares against the analytic gradients already sitting in the store,
// and reports the worst relative error.

#include "permnet/graph.hpp"
#include "permnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

namespace permnet {

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::string worst_param;
    long coords_checked = 0;

    bool within(double rel_tol) const { return max_rel_err < rel_tol; }
};

/// Before calling: run one forward+backward so that store gradients hold the
/// analytic values. loss_fn must recompute the loss from the live parameter
/// values without touching the gradients.
///
/// sample_per_param > 0 checks a deterministic random subset of coordinates
/// per parameter (for big tables); 0 checks every coordinate.
template <class S>
GradCheckReport grad_check(ParameterStore<S>& store,
                           const std::function<double()>& loss_fn,
                           double h = 1e-4,
                           int sample_per_param = 0,
                           std::uint64_t sample_seed = 17) {
    GradCheckReport rep;
    Rng rng(sample_seed);
    for (std::size_t p = 0; p < store.count(); ++p) {
        auto& e = store.entry(p);
        const long n = static_cast<long>(e.value.size());
        std::vector<long> coords;
        if (sample_per_param > 0 && n > sample_per_param) {
            for (int k = 0; k < sample_per_param; ++k)
                coords.push_back(static_cast<long>(rng.below(static_cast<std::uint64_t>(n))));
        } else {
            coords.resize(static_cast<std::size_t>(n));
            for (long k = 0; k < n; ++k) coords[static_cast<std::size_t>(k)] = k;
        }
        for (long c : coords) {
            S* ptr = e.value.data() + c;
            const S saved = *ptr;
            *ptr = saved + static_cast<S>(h);
            const double up = loss_fn();
            *ptr = saved - static_cast<S>(h);
            const double down = loss_fn();
            *ptr = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = static_cast<double>(e.grad.data()[c]);
            const double abs_err = std::abs(numeric - analytic);
            const double rel = abs_err / std::max({std::abs(numeric), std::abs(analytic), 1.0});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = e.name;
            }
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
            ++rep.coords_checked;
        }
    }
    return rep;
}

} // namespace permnet
