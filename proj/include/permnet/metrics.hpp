#pragma once

// Token accuracy and whole-example accuracy. Both operate on emitted-token
// sequences: the reference is the target without its leading <sos> (so the
// final <eos> counts); predictions shorter than the reference count the
// missing positions as wrong.

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace permnet {

inline double token_accuracy(const std::vector<int>& pred, const std::vector<int>& target) {
    if (target.empty()) throw std::invalid_argument("token_accuracy: empty target");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < target.size(); ++i)
        if (i < pred.size() && pred[i] == target[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(target.size());
}

inline double whole_example_accuracy(const std::vector<int>& pred,
                                     const std::vector<int>& target) {
    return pred == target ? 1.0 : 0.0;
}

struct EvalResult {
    double ta = 0.0;
    double wea = 0.0;
    long examples = 0;
};

/// Unweighted means over example pairs.
inline EvalResult aggregate_accuracy(const std::vector<std::vector<int>>& preds,
                                     const std::vector<std::vector<int>>& targets) {
    if (preds.size() != targets.size())
        throw std::invalid_argument("aggregate_accuracy: size mismatch");
    EvalResult r;
    r.examples = static_cast<long>(preds.size());
    if (r.examples == 0) return r;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        r.ta += token_accuracy(preds[i], targets[i]);
        r.wea += whole_example_accuracy(preds[i], targets[i]);
    }
    r.ta /= static_cast<double>(r.examples);
    r.wea /= static_cast<double>(r.examples);
    return r;
}

} // namespace permnet
