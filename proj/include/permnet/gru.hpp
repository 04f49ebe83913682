#pragma once

// GRU cell and the bidirectional encoder shared by every recurrent model.
// Gate layout inside the packed weight matrices is [z | r | n].

#include "permnet/graph.hpp"
#include "permnet/rng.hpp"

#include <string>
#include <vector>

namespace permnet {

template <class S>
struct GruCell {
    std::string prefix;
    int in = 0, hidden = 0;

    void add_params(ParameterStore<S>& store, int in_size, int hidden_size) {
        in = in_size;
        hidden = hidden_size;
        store.add(prefix + ".w_x", in, 3 * hidden);
        store.add(prefix + ".w_h", hidden, 3 * hidden);
        store.add(prefix + ".b", 1, 3 * hidden);
    }

    template <class R>
    void init(ParameterStore<S>& store, R& rng) const {
        init_uniform(store.at(prefix + ".w_x"), in, rng);
        init_uniform(store.at(prefix + ".w_h"), hidden, rng);
        init_uniform(store.at(prefix + ".b"), hidden, rng);
    }

    struct Lease {
        Var w_x, w_h, b;
        int hidden = 0;
    };

    Lease lease(Tape<S>& tape, ParameterStore<S>& store) const {
        return Lease{store.lease(tape, prefix + ".w_x"), store.lease(tape, prefix + ".w_h"),
                     store.lease(tape, prefix + ".b"), hidden};
    }

    /// One step: x is B x in, h is B x hidden; returns the next hidden state.
    static Var step(Tape<S>& t, const Lease& p, Var x, Var h) {
        const int H = p.hidden;
        Var gx = t.add_rowvec(t.matmul(x, p.w_x), p.b);
        Var gh = t.matmul(h, p.w_h);
        Var z = t.sigmoid(t.add(t.slice_cols(gx, 0, H), t.slice_cols(gh, 0, H)));
        Var r = t.sigmoid(t.add(t.slice_cols(gx, H, H), t.slice_cols(gh, H, H)));
        Var n = t.tanh_(t.add(t.slice_cols(gx, 2 * H, H),
                              t.cmul(r, t.slice_cols(gh, 2 * H, H))));
        // h' = (1 - z) . n + z . h
        return t.add(t.sub(n, t.cmul(z, n)), t.cmul(z, h));
    }
};

/// Bidirectional GRU over embedded steps. Produces the per-position encoding
/// stack M_e ((B*L) x 2H, forward and backward states concatenated) plus a
/// projected summary state (B x H) that seeds the decoder.
template <class S>
struct BidirGruEncoder {
    std::string prefix;
    GruCell<S> fwd, bwd;
    int in = 0, hidden = 0;

    void add_params(ParameterStore<S>& store, int in_size, int hidden_size) {
        in = in_size;
        hidden = hidden_size;
        fwd.prefix = prefix + ".fwd";
        bwd.prefix = prefix + ".bwd";
        fwd.add_params(store, in, hidden);
        bwd.add_params(store, in, hidden);
        store.add(prefix + ".w_last", 2 * hidden, hidden);
        store.add(prefix + ".b_last", 1, hidden);
    }

    template <class R>
    void init(ParameterStore<S>& store, R& rng) const {
        fwd.init(store, rng);
        bwd.init(store, rng);
        init_uniform(store.at(prefix + ".w_last"), 2 * hidden, rng);
        init_uniform(store.at(prefix + ".b_last"), 2 * hidden, rng);
    }

    struct Output {
        Var me;    // (B*L) x 2H, example-major
        Var last;  // B x H
        int L = 0;
    };

    /// steps[t] is the B x in embedding of source position t.
    Output forward(Tape<S>& t, ParameterStore<S>& store, const std::vector<Var>& steps) const {
        if (steps.empty()) throw std::invalid_argument("encoder got an empty sequence");
        const Eigen::Index B = t.val(steps[0]).rows();
        const int L = static_cast<int>(steps.size());
        auto pf = fwd.lease(t, store);
        auto pb = bwd.lease(t, store);
        Var hf = t.constant(Mat<S>::Zero(B, hidden));
        Var hb = t.constant(Mat<S>::Zero(B, hidden));
        std::vector<Var> out_f(steps.size()), out_b(steps.size());
        for (int i = 0; i < L; ++i) {
            hf = GruCell<S>::step(t, pf, steps[static_cast<std::size_t>(i)], hf);
            out_f[static_cast<std::size_t>(i)] = hf;
            hb = GruCell<S>::step(t, pb, steps[static_cast<std::size_t>(L - 1 - i)], hb);
            out_b[static_cast<std::size_t>(L - 1 - i)] = hb;
        }
        std::vector<Var> both(steps.size());
        for (std::size_t i = 0; i < steps.size(); ++i)
            both[i] = t.concat_cols(out_f[i], out_b[i]);
        Output o;
        o.me = t.stack_steps(both);
        o.last = t.tanh_(t.linear(t.concat_cols(hf, hb), store.lease(t, prefix + ".w_last"),
                                  store.lease(t, prefix + ".b_last")));
        o.L = L;
        return o;
    }
};

} // namespace permnet
