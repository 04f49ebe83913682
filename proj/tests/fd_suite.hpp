#pragma once

// Finite-difference closures for every tape primitive. Shared between the
// graph unit tests and the acceptance gradient sweep: each case builds a
// small randomized problem around one op, runs forward+backward once for
// the analytic gradients, then re-evaluates the loss from perturbed
// parameter values under grad_check.

#include "permnet/gradcheck.hpp"
#include "permnet/graph.hpp"
#include "permnet/rng.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace permnet::fdtest {

struct FdCase {
    std::string name;
    std::function<GradCheckReport(std::uint64_t seed)> run;
};

// One randomized problem: parameters live in `store`, shapes and integer
// side-data are frozen at construction, and `forward` rebuilds the scalar
// loss on a fresh tape from the live parameter values.
struct Ctx {
    Rng rng;
    ParameterStore<double> store;

    explicit Ctx(std::uint64_t seed) : rng(seed) {}

    int dim(int lo, int hi) { return lo + rng.below_int(hi - lo + 1); }

    Mat<double> mat(int r, int c, double lo = -1.0, double hi = 1.0) {
        Mat<double> m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
        return m;
    }

    // Projection weights bounded away from zero so every output coordinate
    // contributes to the loss.
    Mat<double> proj(Eigen::Index r, Eigen::Index c) {
        Mat<double> m(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) {
                const double mag = rng.uniform(0.25, 1.25);
                m(i, j) = rng.below(2) ? mag : -mag;
            }
        return m;
    }

    ParamEntry<double>& P(const std::string& name, int r, int c,
                          double lo = -1.0, double hi = 1.0) {
        auto& e = store.add(name, r, c);
        e.value = mat(r, c, lo, hi);
        return e;
    }

    std::vector<int> ids(int n, int vocab) {
        std::vector<int> v(static_cast<std::size_t>(n));
        for (auto& x : v) x = rng.below_int(vocab);
        return v;
    }
};

// Keep relu-style kinks at distance >> h from the FD probes.
inline void away_from_zero(Mat<double>& m, double margin = 0.1) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            if (std::abs(m(i, j)) < margin) m(i, j) += (m(i, j) < 0 ? -margin : margin);
}

template <class F>
GradCheckReport fd_run(Ctx& cx, F&& forward, double h = 1e-5) {
    cx.store.zero_grads();
    {
        Tape<double> tape;
        tape.backward(forward(tape));
    }
    auto loss_fn = [&]() {
        Tape<double> tape;
        tape.grad_enabled = false;
        Var y = forward(tape);
        return tape.val(y)(0, 0);
    };
    return grad_check(cx.store, loss_fn, h);
}

// Reduce an op output to a scalar against fixed, sign-mixed weights so the
// upstream gradient reaching the op is non-uniform.
template <class S>
Var project(Tape<S>& t, Var y, const Mat<S>& w) {
    return t.sum_all(t.cmul(y, t.constant(w)));
}

inline std::vector<FdCase> fd_cases() {
    std::vector<FdCase> cs;
    auto add_case = [&](const char* name, std::function<GradCheckReport(std::uint64_t)> f) {
        cs.push_back({name, std::move(f)});
    };

    add_case("add", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(1, 5);
        cx.P("a", r, c);
        cx.P("b", r, c);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.add(cx.store.lease(t, "a"), cx.store.lease(t, "b")), W);
        });
    });

    add_case("sub", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(1, 5);
        cx.P("a", r, c);
        cx.P("b", r, c);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.sub(cx.store.lease(t, "a"), cx.store.lease(t, "b")), W);
        });
    });

    add_case("cmul", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(1, 5);
        cx.P("a", r, c);
        cx.P("b", r, c);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.cmul(cx.store.lease(t, "a"), cx.store.lease(t, "b")), W);
        });
    });

    add_case("scale", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(1, 5);
        cx.P("a", r, c);
        const double k = cx.rng.uniform(-2.0, 2.0);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.scale(cx.store.lease(t, "a"), k), W);
        });
    });

    add_case("matmul", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), k = cx.dim(1, 4), c = cx.dim(1, 4);
        cx.P("a", r, k);
        cx.P("b", k, c);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.matmul(cx.store.lease(t, "a"), cx.store.lease(t, "b")), W);
        });
    });

    add_case("matmul_nt", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), k = cx.dim(1, 4), c = cx.dim(1, 4);
        cx.P("a", r, k);
        cx.P("b", c, k);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.matmul_nt(cx.store.lease(t, "a"), cx.store.lease(t, "b")), W);
        });
    });

    add_case("add_rowvec", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(1, 5);
        cx.P("a", r, c);
        cx.P("v", 1, c);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.add_rowvec(cx.store.lease(t, "a"), cx.store.lease(t, "v")), W);
        });
    });

    add_case("linear", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), k = cx.dim(1, 4), c = cx.dim(1, 4);
        cx.P("x", r, k);
        cx.P("w", k, c);
        cx.P("b", 1, c);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t,
                           t.linear(cx.store.lease(t, "x"), cx.store.lease(t, "w"),
                                    cx.store.lease(t, "b")),
                           W);
        });
    });

    add_case("sigmoid", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(1, 5);
        cx.P("a", r, c, -2.0, 2.0);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.sigmoid(cx.store.lease(t, "a")), W);
        });
    });

    add_case("tanh", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(1, 5);
        cx.P("a", r, c, -2.0, 2.0);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.tanh_(cx.store.lease(t, "a")), W);
        });
    });

    add_case("relu", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(1, 5);
        auto& e = cx.P("a", r, c);
        away_from_zero(e.value);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.relu(cx.store.lease(t, "a")), W);
        });
    });

    add_case("softmax_rows", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(2, 6);
        cx.P("a", r, c, -2.0, 2.0);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.softmax_rows(cx.store.lease(t, "a")), W);
        });
    });

    add_case("log_softmax_rows", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(2, 6);
        cx.P("a", r, c, -2.0, 2.0);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.log_softmax_rows(cx.store.lease(t, "a")), W);
        });
    });

    add_case("mlog_softmax_rows", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(2, 6);
        cx.P("a", r, c, -2.0, 2.0);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.mlog_softmax_rows(cx.store.lease(t, "a")), W);
        });
    });

    add_case("normalize_rows", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(2, 6);
        auto& e = cx.P("a", r, c);
        away_from_zero(e.value, 0.2); // keep row norms well conditioned
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.normalize_rows(cx.store.lease(t, "a"), 1e-8), W);
        });
    });

    add_case("layer_norm_rows", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(2, 6);
        cx.P("a", r, c);
        cx.P("gamma", 1, c, 0.5, 1.5);
        cx.P("beta", 1, c);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t,
                           t.layer_norm_rows(cx.store.lease(t, "a"), cx.store.lease(t, "gamma"),
                                             cx.store.lease(t, "beta"), 1e-5),
                           W);
        });
    });

    add_case("slice_cols", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(2, 6);
        cx.P("a", r, c);
        const int c0 = cx.rng.below_int(c - 1);
        const int n = 1 + cx.rng.below_int(c - c0 - 1);
        const Mat<double> W = cx.proj(r, n);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.slice_cols(cx.store.lease(t, "a"), c0, n), W);
        });
    });

    add_case("concat_cols", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), ca = cx.dim(1, 4), cb = cx.dim(1, 4);
        cx.P("a", r, ca);
        cx.P("b", r, cb);
        const Mat<double> W = cx.proj(r, ca + cb);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.concat_cols(cx.store.lease(t, "a"), cx.store.lease(t, "b")), W);
        });
    });

    add_case("stack_steps", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), D = cx.dim(1, 4), L = cx.dim(2, 4);
        for (int i = 0; i < L; ++i) cx.P("s" + std::to_string(i), B, D);
        const Mat<double> W = cx.proj(B * L, D);
        return fd_run(cx, [&, L](Tape<double>& t) {
            std::vector<Var> steps;
            for (int i = 0; i < L; ++i) steps.push_back(cx.store.lease(t, "s" + std::to_string(i)));
            return project(t, t.stack_steps(steps), W);
        });
    });

    add_case("fold_rows", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(1, 4);
        cx.P("a", B * L, 1);
        const Mat<double> W = cx.proj(B, L);
        return fd_run(cx, [&, B, L](Tape<double>& t) {
            return project(t, t.fold_rows(cx.store.lease(t, "a"), B, L), W);
        });
    });

    add_case("rep_rows", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), D = cx.dim(1, 4), L = cx.dim(1, 4);
        cx.P("a", B, D);
        const Mat<double> W = cx.proj(B * L, D);
        return fd_run(cx, [&, L](Tape<double>& t) {
            return project(t, t.rep_rows(cx.store.lease(t, "a"), L), W);
        });
    });

    add_case("pick_rows", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(2, 5), c = cx.dim(1, 4), n = cx.dim(2, 6);
        cx.P("a", r, c);
        const std::vector<int> rows = cx.ids(n, r); // duplicates likely
        const Mat<double> W = cx.proj(n, c);
        return fd_run(cx, [&, rows](Tape<double>& t) {
            return project(t, t.pick_rows(cx.store.lease(t, "a"), rows), W);
        });
    });

    add_case("rows_embed", [](std::uint64_t s) {
        Ctx cx(s);
        const int v = cx.dim(3, 6), d = cx.dim(1, 4), n = cx.dim(2, 6);
        cx.P("table", v, d);
        const std::vector<int> ids = cx.ids(n, v);
        const Mat<double> W = cx.proj(n, d);
        return fd_run(cx, [&, ids](Tape<double>& t) {
            return project(t, t.rows_embed(cx.store.lease(t, "table"), ids), W);
        });
    });

    add_case("attn_scores", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(1, 4), D = cx.dim(1, 4);
        cx.P("me", B * L, D);
        cx.P("q", B, D);
        const Mat<double> W = cx.proj(B, L);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.attn_scores(cx.store.lease(t, "me"), cx.store.lease(t, "q")), W);
        });
    });

    add_case("weighted_context", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(1, 4), D = cx.dim(1, 4);
        cx.P("me", B * L, D);
        cx.P("w", B, L);
        const Mat<double> W = cx.proj(B, D);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.weighted_context(cx.store.lease(t, "me"), cx.store.lease(t, "w")),
                           W);
        });
    });

    add_case("index_weighted_sum", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(2, 4), v = cx.dim(3, 6), d = cx.dim(1, 4);
        cx.P("table", v, d);
        cx.P("w", B, L);
        IMat ids(B, L);
        std::vector<int> lens;
        for (int b = 0; b < B; ++b) {
            lens.push_back(1 + cx.rng.below_int(L));
            for (int t = 0; t < L; ++t) ids(b, t) = cx.rng.below_int(v);
        }
        const Mat<double> W = cx.proj(B, d);
        return fd_run(cx, [&, ids, lens](Tape<double>& t) {
            return project(
                t, t.index_weighted_sum(cx.store.lease(t, "table"), cx.store.lease(t, "w"), ids, lens),
                W);
        });
    });

    add_case("antidiag_outer", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(2, 5), K = cx.dim(1, 5);
        cx.P("u", B, L);
        cx.P("w", B, K);
        const Mat<double> W = cx.proj(B, L);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.antidiag_outer(cx.store.lease(t, "u"), cx.store.lease(t, "w")), W);
        });
    });

    add_case("scatter_tokens", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(2, 4), v = cx.dim(3, 7);
        cx.P("w", B, L);
        IMat ids(B, L);
        std::vector<int> lens;
        for (int b = 0; b < B; ++b) {
            lens.push_back(1 + cx.rng.below_int(L));
            for (int t = 0; t < L; ++t) ids(b, t) = cx.rng.below_int(v);
        }
        const Mat<double> W = cx.proj(B, v);
        return fd_run(cx, [&, ids, lens, v](Tape<double>& t) {
            return project(t, t.scatter_tokens(cx.store.lease(t, "w"), ids, v, lens), W);
        });
    });

    add_case("bmm_nt", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(1, 3), M = cx.dim(1, 3), D = cx.dim(1, 4);
        cx.P("a", B * L, D);
        cx.P("b", B * M, D);
        const Mat<double> W = cx.proj(B * L, M);
        return fd_run(cx, [&, L, M](Tape<double>& t) {
            return project(t, t.bmm_nt(cx.store.lease(t, "a"), cx.store.lease(t, "b"), L, M), W);
        });
    });

    add_case("bmm_nn", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(1, 3), M = cx.dim(1, 3), N = cx.dim(1, 4);
        cx.P("a", B * L, M);
        cx.P("b", B * M, N);
        const Mat<double> W = cx.proj(B * L, N);
        return fd_run(cx, [&, L, M](Tape<double>& t) {
            return project(t, t.bmm_nn(cx.store.lease(t, "a"), cx.store.lease(t, "b"), L, M), W);
        });
    });

    add_case("bmv", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(1, 4), M = cx.dim(1, 4);
        cx.P("a", B * L, M);
        cx.P("v", B, M);
        const Mat<double> W = cx.proj(B, L);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.bmv(cx.store.lease(t, "a"), cx.store.lease(t, "v")), W);
        });
    });

    add_case("scale_rows", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(1, 4), D = cx.dim(1, 4);
        cx.P("a", B * L, D);
        cx.P("s", B, L);
        const Mat<double> W = cx.proj(B * L, D);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.scale_rows(cx.store.lease(t, "a"), cx.store.lease(t, "s")), W);
        });
    });

    add_case("colsum_blocks", [](std::uint64_t s) {
        Ctx cx(s);
        const int B = cx.dim(1, 3), L = cx.dim(1, 4), D = cx.dim(1, 4);
        cx.P("a", B * L, D);
        const Mat<double> W = cx.proj(B, D);
        return fd_run(cx, [&, L](Tape<double>& t) {
            return project(t, t.colsum_blocks(cx.store.lease(t, "a"), L), W);
        });
    });

    add_case("cmul_colvec", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(1, 5);
        cx.P("a", r, c);
        cx.P("c", r, 1);
        const Mat<double> W = cx.proj(r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            return project(t, t.cmul_colvec(cx.store.lease(t, "a"), cx.store.lease(t, "c")), W);
        });
    });

    add_case("sum_all", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(1, 4), c = cx.dim(1, 5);
        cx.P("a", r, c);
        return fd_run(cx, [&](Tape<double>& t) {
            Var a = cx.store.lease(t, "a");
            return t.sum_all(t.cmul(a, a)); // non-uniform gradient 2a
        });
    });

    add_case("cross_entropy_sum", [](std::uint64_t s) {
        Ctx cx(s);
        const int r = cx.dim(3, 6), v = cx.dim(3, 6);
        cx.P("logits", r, v, -2.0, 2.0);
        std::vector<int> targets = cx.ids(r, v);
        const int ignore_id = 0;
        targets[0] = ignore_id;                       // at least one masked row
        if (targets[1] == ignore_id) targets[1] = 1;  // and one contributing row
        return fd_run(cx, [&, targets](Tape<double>& t) {
            return t.cross_entropy_sum(cx.store.lease(t, "logits"), targets, ignore_id);
        });
    });

    return cs;
}

} // namespace permnet::fdtest
