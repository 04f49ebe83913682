#pragma once

// Reverse-mode autodiff over dense Eigen matrices. A Tape owns every node
// created during one forward pass; backward() walks the nodes in reverse
// creation order, so creation order is the topological order. Parameters
// live outside the tape (see ParameterStore) and are leased onto it per
// forward pass; their gradients are flushed into the store by backward().

#include "permnet/numerics.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace permnet {

struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

namespace detail {
inline void require(bool cond, const char* what) {
    if (!cond) throw std::logic_error(std::string("tape: ") + what);
}
} // namespace detail

template <class S>
class Tape {
public:
    /// When false (free-running decode, inspection) no backward closures are
    /// recorded and backward() is unavailable.
    bool grad_enabled = true;

    void clear() {
        vals_.clear();
        grads_.clear();
        backs_.clear();
        needs_.clear();
        sinks_.clear();
    }

    std::size_t size() const { return vals_.size(); }

    const Mat<S>& val(Var v) const {
        detail::require(v.valid() && static_cast<std::size_t>(v.id) < vals_.size(), "bad var id");
        return vals_[v.id];
    }

    /// Gradient of the last backward() root with respect to node v.
    const Mat<S>& grad(Var v) const {
        detail::require(v.valid() && static_cast<std::size_t>(v.id) < grads_.size(), "bad var id");
        detail::require(grads_[v.id].size() != 0, "gradient was never reached");
        return grads_[v.id];
    }

    bool has_grad(Var v) const {
        return v.valid() && static_cast<std::size_t>(v.id) < grads_.size() && grads_[v.id].size() != 0;
    }

    /// A node carrying data that is not differentiated through (masks, inputs).
    Var constant(Mat<S> m) { return push(std::move(m), false, nullptr); }

    /// A differentiable leaf whose gradient stays on the tape (tests).
    Var leaf(Mat<S> m) { return push(std::move(m), true, nullptr); }

    /// Lease a parameter: value is copied onto the tape, gradient is added
    /// into *sink by backward().
    Var param(const Mat<S>& value, Mat<S>* sink) {
        detail::require(sink != nullptr, "param needs a gradient sink");
        detail::require(sink->rows() == value.rows() && sink->cols() == value.cols(),
                        "param sink shape mismatch");
        return push(value, true, sink);
    }

    // ---- elementwise / linear ----------------------------------------

    Var add(Var a, Var b) {
        const Mat<S>&A = val(a), &B = val(b);
        detail::require(A.rows() == B.rows() && A.cols() == B.cols(), "add shape mismatch");
        Var out = push(A + B, needs(a) || needs(b), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(a)) T.acc(a) += go;
            if (T.needs(b)) T.acc(b) += go;
        });
        return out;
    }

    Var sub(Var a, Var b) {
        const Mat<S>&A = val(a), &B = val(b);
        detail::require(A.rows() == B.rows() && A.cols() == B.cols(), "sub shape mismatch");
        Var out = push(A - B, needs(a) || needs(b), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(a)) T.acc(a) += go;
            if (T.needs(b)) T.acc(b) -= go;
        });
        return out;
    }

    Var cmul(Var a, Var b) {
        const Mat<S>&A = val(a), &B = val(b);
        detail::require(A.rows() == B.rows() && A.cols() == B.cols(), "cmul shape mismatch");
        Var out = push(A.cwiseProduct(B), needs(a) || needs(b), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(a)) T.acc(a) += go.cwiseProduct(T.vals_[b.id]);
            if (T.needs(b)) T.acc(b) += go.cwiseProduct(T.vals_[a.id]);
        });
        return out;
    }

    Var scale(Var a, S c) {
        Var out = push(val(a) * c, needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (T.needs(a)) T.acc(a) += T.grads_[out.id] * c;
        });
        return out;
    }

    Var matmul(Var a, Var b) {
        const Mat<S>&A = val(a), &B = val(b);
        detail::require(A.cols() == B.rows(), "matmul inner dim mismatch");
        Var out = push(A * B, needs(a) || needs(b), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(a)) T.acc(a) += go * T.vals_[b.id].transpose();
            if (T.needs(b)) T.acc(b) += T.vals_[a.id].transpose() * go;
        });
        return out;
    }

    /// A * B^T without materialising the transpose on the tape.
    Var matmul_nt(Var a, Var b) {
        const Mat<S>&A = val(a), &B = val(b);
        detail::require(A.cols() == B.cols(), "matmul_nt inner dim mismatch");
        Var out = push(A * B.transpose(), needs(a) || needs(b), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(a)) T.acc(a) += go * T.vals_[b.id];
            if (T.needs(b)) T.acc(b) += go.transpose() * T.vals_[a.id];
        });
        return out;
    }

    /// Broadcast-add a 1 x C row vector to every row of a.
    Var add_rowvec(Var a, Var r) {
        const Mat<S>&A = val(a), &R = val(r);
        detail::require(R.rows() == 1 && R.cols() == A.cols(), "add_rowvec wants 1 x cols");
        Var out = push(A.rowwise() + R.row(0), needs(a) || needs(r), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(a)) T.acc(a) += go;
            if (T.needs(r)) T.acc(r) += go.colwise().sum();
        });
        return out;
    }

    Var linear(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

    // ---- nonlinearities ----------------------------------------------

    Var sigmoid(Var a) {
        Mat<S> y = (S(1) / (S(1) + (-val(a).array()).exp())).matrix();
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& Y = T.vals_[out.id];
            T.acc(a) += T.grads_[out.id].cwiseProduct(
                (Y.array() * (S(1) - Y.array())).matrix());
        });
        return out;
    }

    Var tanh_(Var a) {
        Mat<S> y = val(a).array().tanh().matrix();
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& Y = T.vals_[out.id];
            T.acc(a) += T.grads_[out.id].cwiseProduct((S(1) - Y.array().square()).matrix());
        });
        return out;
    }

    Var relu(Var a) {
        Mat<S> y = val(a).cwiseMax(S(0));
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& X = T.vals_[a.id];
            T.acc(a) += T.grads_[out.id].cwiseProduct(
                (X.array() > S(0)).template cast<S>().matrix());
        });
        return out;
    }

    // ---- row-wise (log-)softmax family ---------------------------------

    Var softmax_rows(Var a) {
        Mat<S> y = rowwise_softmax(val(a));
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& Y = T.vals_[out.id];
            const Mat<S>& go = T.grads_[out.id];
            Mat<S>& ga = T.acc(a);
            for (Eigen::Index r = 0; r < Y.rows(); ++r) {
                const S dot = go.row(r).dot(Y.row(r));
                ga.row(r) += Y.row(r).cwiseProduct(go.row(r).array().matrix() - Mat<S>::Constant(1, Y.cols(), dot));
            }
        });
        return out;
    }

    Var log_softmax_rows(Var a) {
        const Mat<S>& A = val(a);
        Mat<S> y(A.rows(), A.cols());
        for (Eigen::Index r = 0; r < A.rows(); ++r) {
            const S m = A.row(r).maxCoeff();
            const S lse = m + std::log((A.row(r).array() - m).exp().sum());
            y.row(r) = A.row(r).array() - lse;
        }
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& Y = T.vals_[out.id];
            const Mat<S>& go = T.grads_[out.id];
            Mat<S>& ga = T.acc(a);
            for (Eigen::Index r = 0; r < Y.rows(); ++r) {
                const S sum = go.row(r).sum();
                ga.row(r) += go.row(r) - (Y.row(r).array().exp() * sum).matrix();
            }
        });
        return out;
    }

    /// mlog-softmax: ln(1 + (e-1) * softmax(x)) applied per row.
    Var mlog_softmax_rows(Var a) {
        Mat<S> s = rowwise_softmax(val(a));
        Mat<S> y = ((s.array() * (S(M_E) - S(1))) + S(1)).log().matrix();
        Var out = push(std::move(y), needs(a), nullptr);
        if (grad_enabled && needs(a)) aux_[out.id] = std::move(s);
        record(out, [=](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& P = T.aux_.at(out.id); // softmax rows
            const Mat<S>& go = T.grads_[out.id];
            Mat<S>& ga = T.acc(a);
            const S k = S(M_E) - S(1);
            for (Eigen::Index r = 0; r < P.rows(); ++r) {
                // u = dL/ds, then chain through the softmax Jacobian.
                Eigen::Matrix<S, 1, Eigen::Dynamic> u =
                    (go.row(r).array() * k / (S(1) + k * P.row(r).array())).matrix();
                const S dot = u.dot(P.row(r));
                ga.row(r) += P.row(r).cwiseProduct(u - Mat<S>::Constant(1, P.cols(), dot));
            }
        });
        return out;
    }

    /// Per-row renormalisation to sum 1; rows whose sum is below eps map to 0.
    Var normalize_rows(Var a, S eps) {
        const Mat<S>& A = val(a);
        Mat<S> y = Mat<S>::Zero(A.rows(), A.cols());
        for (Eigen::Index r = 0; r < A.rows(); ++r) {
            const S s = A.row(r).sum();
            if (s > eps) y.row(r) = A.row(r) / s;
        }
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& X = T.vals_[a.id];
            const Mat<S>& Y = T.vals_[out.id];
            const Mat<S>& go = T.grads_[out.id];
            Mat<S>& ga = T.acc(a);
            for (Eigen::Index r = 0; r < X.rows(); ++r) {
                const S s = X.row(r).sum();
                if (s <= eps) continue;
                const S dot = go.row(r).dot(Y.row(r));
                ga.row(r) += (go.row(r) - Mat<S>::Constant(1, X.cols(), dot)) / s;
            }
        });
        return out;
    }

    Var layer_norm_rows(Var a, Var gamma, Var beta, S eps) {
        const Mat<S>& A = val(a);
        const Eigen::Index D = A.cols();
        detail::require(val(gamma).rows() == 1 && val(gamma).cols() == D, "layer_norm gamma shape");
        detail::require(val(beta).rows() == 1 && val(beta).cols() == D, "layer_norm beta shape");
        Mat<S> xhat(A.rows(), D);
        Vec<S> inv_sigma(A.rows());
        for (Eigen::Index r = 0; r < A.rows(); ++r) {
            const S mu = A.row(r).mean();
            const S var = (A.row(r).array() - mu).square().sum() / S(D);
            const S is = S(1) / std::sqrt(var + eps);
            inv_sigma[r] = is;
            xhat.row(r) = (A.row(r).array() - mu) * is;
        }
        Mat<S> y = (xhat.array().rowwise() * val(gamma).row(0).array()).rowwise() +
                   val(beta).row(0).array();
        Var out = push(y.matrix(), needs(a) || needs(gamma) || needs(beta), nullptr);
        if (grad_enabled && (needs(a) || needs(gamma))) {
            aux_[out.id] = std::move(xhat);
            aux_vec_[out.id] = std::move(inv_sigma);
        }
        record(out, [=](Tape& T) {
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(beta)) T.acc(beta) += go.colwise().sum();
            if (!T.needs(a) && !T.needs(gamma)) return;
            const Mat<S>& XH = T.aux_.at(out.id);
            if (T.needs(gamma)) T.acc(gamma) += go.cwiseProduct(XH).colwise().sum();
            if (!T.needs(a)) return;
            const Vec<S>& IS = T.aux_vec_.at(out.id);
            const auto& G = T.vals_[gamma.id];
            Mat<S>& ga = T.acc(a);
            for (Eigen::Index r = 0; r < XH.rows(); ++r) {
                Eigen::Matrix<S, 1, Eigen::Dynamic> dxh =
                    go.row(r).cwiseProduct(G.row(0));
                const S m1 = dxh.mean();
                const S m2 = dxh.cwiseProduct(XH.row(r)).mean();
                ga.row(r) += IS[r] * (dxh.array() - m1 - XH.row(r).array() * m2).matrix();
            }
        });
        return out;
    }

    // ---- shape plumbing ------------------------------------------------

    Var slice_cols(Var a, int c0, int n) {
        const Mat<S>& A = val(a);
        detail::require(c0 >= 0 && n >= 1 && c0 + n <= A.cols(), "slice_cols out of range");
        Var out = push(A.middleCols(c0, n), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (T.needs(a)) T.acc(a).middleCols(c0, n) += T.grads_[out.id];
        });
        return out;
    }

    Var concat_cols(Var a, Var b) {
        const Mat<S>&A = val(a), &B = val(b);
        detail::require(A.rows() == B.rows(), "concat_cols row mismatch");
        Mat<S> y(A.rows(), A.cols() + B.cols());
        y << A, B;
        const int ca = static_cast<int>(A.cols());
        Var out = push(std::move(y), needs(a) || needs(b), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(a)) T.acc(a) += go.leftCols(ca);
            if (T.needs(b)) T.acc(b) += go.rightCols(go.cols() - ca);
        });
        return out;
    }

    /// Interleave per-step B x D matrices into an example-major (B*L) x D
    /// stack: row b*L + t holds steps[t].row(b).
    Var stack_steps(const std::vector<Var>& steps) {
        detail::require(!steps.empty(), "stack_steps of nothing");
        const Eigen::Index B = val(steps[0]).rows(), D = val(steps[0]).cols();
        const Eigen::Index L = static_cast<Eigen::Index>(steps.size());
        Mat<S> y(B * L, D);
        bool any = false;
        for (Eigen::Index t = 0; t < L; ++t) {
            const Mat<S>& St = val(steps[t]);
            detail::require(St.rows() == B && St.cols() == D, "stack_steps shape mismatch");
            any = any || needs(steps[t]);
            for (Eigen::Index b = 0; b < B; ++b) y.row(b * L + t) = St.row(b);
        }
        std::vector<Var> parents = steps;
        Var out = push(std::move(y), any, nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>& go = T.grads_[out.id];
            for (Eigen::Index t = 0; t < L; ++t) {
                if (!T.needs(parents[t])) continue;
                Mat<S>& g = T.acc(parents[t]);
                for (Eigen::Index b = 0; b < B; ++b) g.row(b) += go.row(b * L + t);
            }
        });
        return out;
    }

    /// (B*L) x 1 column -> B x L matrix (example-major rows).
    Var fold_rows(Var a, int B, int L) {
        const Mat<S>& A = val(a);
        detail::require(A.cols() == 1 && A.rows() == Eigen::Index(B) * L, "fold_rows shape");
        Mat<S> y(B, L);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < L; ++t) y(b, t) = A(Eigen::Index(b) * L + t, 0);
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& go = T.grads_[out.id];
            Mat<S>& ga = T.acc(a);
            for (int b = 0; b < B; ++b)
                for (int t = 0; t < L; ++t) ga(Eigen::Index(b) * L + t, 0) += go(b, t);
        });
        return out;
    }

    /// Repeat each row of a B x D matrix L times -> (B*L) x D.
    Var rep_rows(Var a, int L) {
        const Mat<S>& A = val(a);
        Mat<S> y(A.rows() * L, A.cols());
        for (Eigen::Index b = 0; b < A.rows(); ++b)
            for (int t = 0; t < L; ++t) y.row(b * L + t) = A.row(b);
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& go = T.grads_[out.id];
            Mat<S>& ga = T.acc(a);
            for (Eigen::Index b = 0; b < ga.rows(); ++b)
                for (int t = 0; t < L; ++t) ga.row(b) += go.row(b * L + t);
        });
        return out;
    }

    /// Gather rows by index (duplicates allowed); backward scatter-adds.
    Var pick_rows(Var a, std::vector<int> rows) {
        const Mat<S>& A = val(a);
        Mat<S> y(static_cast<Eigen::Index>(rows.size()), A.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            detail::require(rows[i] >= 0 && rows[i] < A.rows(), "pick_rows out of range");
            y.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
        }
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=, rows = std::move(rows)](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& go = T.grads_[out.id];
            Mat<S>& g = T.acc(a);
            for (std::size_t i = 0; i < rows.size(); ++i)
                g.row(rows[i]) += go.row(static_cast<Eigen::Index>(i));
        });
        return out;
    }

    // ---- embeddings ------------------------------------------------------

    /// Row lookup: out.row(i) = table.row(ids[i]).
    Var rows_embed(Var table, std::vector<int> ids) {
        const Mat<S>& Tb = val(table);
        Mat<S> y(static_cast<Eigen::Index>(ids.size()), Tb.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            detail::require(ids[i] >= 0 && ids[i] < Tb.rows(), "rows_embed id out of range");
            y.row(static_cast<Eigen::Index>(i)) = Tb.row(ids[i]);
        }
        Var out = push(std::move(y), needs(table), nullptr);
        record(out, [=, ids = std::move(ids)](Tape& T) {
            if (!T.needs(table)) return;
            const Mat<S>& go = T.grads_[out.id];
            Mat<S>& g = T.acc(table);
            for (std::size_t i = 0; i < ids.size(); ++i)
                g.row(ids[i]) += go.row(static_cast<Eigen::Index>(i));
        });
        return out;
    }

    // ---- fused batched sequence ops --------------------------------------
    // Convention: "stacked" matrices hold B examples of L rows each,
    // example-major (row b*L + t). Integer ids/masks ride along as plain data.

    /// scores(b,t) = me.row(b*L+t) . q.row(b)   (me: (B*L) x D, q: B x D)
    Var attn_scores(Var me, Var q) {
        const Mat<S>&M = val(me), &Q = val(q);
        detail::require(M.cols() == Q.cols() && M.rows() % Q.rows() == 0, "attn_scores shapes");
        const Eigen::Index B = Q.rows(), L = M.rows() / B;
        Mat<S> y(B, L);
        for (Eigen::Index b = 0; b < B; ++b)
            y.row(b) = (M.middleRows(b * L, L) * Q.row(b).transpose()).transpose();
        Var out = push(std::move(y), needs(me) || needs(q), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>&M2 = T.vals_[me.id], &Q2 = T.vals_[q.id];
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(me)) {
                Mat<S>& g = T.acc(me);
                for (Eigen::Index b = 0; b < B; ++b)
                    g.middleRows(b * L, L) += go.row(b).transpose() * Q2.row(b);
            }
            if (T.needs(q)) {
                Mat<S>& g = T.acc(q);
                for (Eigen::Index b = 0; b < B; ++b)
                    g.row(b) += go.row(b) * M2.middleRows(b * L, L);
            }
        });
        return out;
    }

    /// out.row(b) = w.row(b) * me_block(b)   (w: B x L, me: (B*L) x D)
    Var weighted_context(Var me, Var w) {
        const Mat<S>&M = val(me), &W = val(w);
        const Eigen::Index B = W.rows(), L = W.cols();
        detail::require(M.rows() == B * L, "weighted_context shapes");
        Mat<S> y(B, M.cols());
        for (Eigen::Index b = 0; b < B; ++b) y.row(b) = W.row(b) * M.middleRows(b * L, L);
        Var out = push(std::move(y), needs(me) || needs(w), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>&M2 = T.vals_[me.id], &W2 = T.vals_[w.id];
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(w)) {
                Mat<S>& g = T.acc(w);
                for (Eigen::Index b = 0; b < B; ++b)
                    g.row(b) += (M2.middleRows(b * L, L) * go.row(b).transpose()).transpose();
            }
            if (T.needs(me)) {
                Mat<S>& g = T.acc(me);
                for (Eigen::Index b = 0; b < B; ++b)
                    g.middleRows(b * L, L) += W2.row(b).transpose() * go.row(b);
            }
        });
        return out;
    }

    /// out.row(b) = sum_t w(b,t) * table.row(ids(b,t)), t < lens[b].
    Var index_weighted_sum(Var table, Var w, const IMat& ids, const std::vector<int>& lens) {
        const Mat<S>&Tb = val(table), &W = val(w);
        const Eigen::Index B = W.rows(), L = W.cols();
        detail::require(ids.rows() == B && ids.cols() == L, "index_weighted_sum id shape");
        Mat<S> y = Mat<S>::Zero(B, Tb.cols());
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index t = 0; t < std::min<Eigen::Index>(L, lens[b]); ++t)
                y.row(b) += W(b, t) * Tb.row(ids(b, t));
        Var out = push(std::move(y), needs(table) || needs(w), nullptr);
        record(out, [=, ids = ids, lens = lens](Tape& T) {
            const Mat<S>&Tb2 = T.vals_[table.id], &W2 = T.vals_[w.id];
            const Mat<S>& go = T.grads_[out.id];
            for (Eigen::Index b = 0; b < go.rows(); ++b) {
                const Eigen::Index n = std::min<Eigen::Index>(W2.cols(), lens[b]);
                for (Eigen::Index t = 0; t < n; ++t) {
                    if (T.needs(w)) T.acc(w)(b, t) += go.row(b).dot(Tb2.row(ids(b, t)));
                    if (T.needs(table)) T.acc(table).row(ids(b, t)) += W2(b, t) * go.row(b);
                }
            }
        });
        return out;
    }

    /// out(b,p) = sum_{i+j==p, j<K, p<L} u(b,i) * w(b,j): the antidiagonal
    /// accumulation of the outer product u^T w, truncated to length L.
    Var antidiag_outer(Var u, Var w) {
        const Mat<S>&U = val(u), &W = val(w);
        detail::require(U.rows() == W.rows(), "antidiag_outer batch mismatch");
        const Eigen::Index B = U.rows(), L = U.cols(), K = W.cols();
        Mat<S> y = Mat<S>::Zero(B, L);
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index i = 0; i < L; ++i)
                for (Eigen::Index j = 0; j < K && i + j < L; ++j)
                    y(b, i + j) += U(b, i) * W(b, j);
        Var out = push(std::move(y), needs(u) || needs(w), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>&U2 = T.vals_[u.id], &W2 = T.vals_[w.id];
            const Mat<S>& go = T.grads_[out.id];
            for (Eigen::Index b = 0; b < B; ++b)
                for (Eigen::Index i = 0; i < L; ++i)
                    for (Eigen::Index j = 0; j < K && i + j < L; ++j) {
                        if (T.needs(u)) T.acc(u)(b, i) += go(b, i + j) * W2(b, j);
                        if (T.needs(w)) T.acc(w)(b, j) += go(b, i + j) * U2(b, i);
                    }
        });
        return out;
    }

    /// out(b, ids(b,t)) += w(b,t) for t < lens[b]; out is B x vocab.
    Var scatter_tokens(Var w, const IMat& ids, int vocab, const std::vector<int>& lens) {
        const Mat<S>& W = val(w);
        const Eigen::Index B = W.rows(), L = W.cols();
        detail::require(ids.rows() == B && ids.cols() == L, "scatter_tokens id shape");
        Mat<S> y = Mat<S>::Zero(B, vocab);
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index t = 0; t < std::min<Eigen::Index>(L, lens[b]); ++t)
                y(b, ids(b, t)) += W(b, t);
        Var out = push(std::move(y), needs(w), nullptr);
        record(out, [=, ids = ids, lens = lens](Tape& T) {
            if (!T.needs(w)) return;
            const Mat<S>& go = T.grads_[out.id];
            Mat<S>& g = T.acc(w);
            for (Eigen::Index b = 0; b < g.rows(); ++b)
                for (Eigen::Index t = 0; t < std::min<Eigen::Index>(g.cols(), lens[b]); ++t)
                    g(b, t) += go(b, ids(b, t));
        });
        return out;
    }

    /// Per-example block matmul: C_b = A_b * B_b^T.
    /// A: (B*L) x D, Bm: (B*M) x D -> (B*L) x M.
    Var bmm_nt(Var a, Var bm, int L, int M) {
        const Mat<S>&A = val(a), &Bm = val(bm);
        detail::require(A.cols() == Bm.cols(), "bmm_nt inner dim");
        detail::require(A.rows() % L == 0 && Bm.rows() % M == 0, "bmm_nt block shape");
        const Eigen::Index B = A.rows() / L;
        detail::require(Bm.rows() / M == B, "bmm_nt batch mismatch");
        Mat<S> y(A.rows(), M);
        for (Eigen::Index b = 0; b < B; ++b)
            y.middleRows(b * L, L) = A.middleRows(b * L, L) * Bm.middleRows(b * M, M).transpose();
        Var out = push(std::move(y), needs(a) || needs(bm), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>&A2 = T.vals_[a.id], &B2 = T.vals_[bm.id];
            const Mat<S>& go = T.grads_[out.id];
            for (Eigen::Index b = 0; b < B; ++b) {
                if (T.needs(a))
                    T.acc(a).middleRows(b * L, L) += go.middleRows(b * L, L) * B2.middleRows(b * M, M);
                if (T.needs(bm))
                    T.acc(bm).middleRows(b * M, M) +=
                        go.middleRows(b * L, L).transpose() * A2.middleRows(b * L, L);
            }
        });
        return out;
    }

    /// Per-example block matmul: C_b = A_b * B_b.
    /// A: (B*L) x M, Bm: (B*M) x N -> (B*L) x N.
    Var bmm_nn(Var a, Var bm, int L, int M) {
        const Mat<S>&A = val(a), &Bm = val(bm);
        detail::require(A.cols() == M, "bmm_nn inner dim");
        detail::require(A.rows() % L == 0 && Bm.rows() % M == 0, "bmm_nn block shape");
        const Eigen::Index B = A.rows() / L;
        detail::require(Bm.rows() / M == B, "bmm_nn batch mismatch");
        Mat<S> y(A.rows(), Bm.cols());
        for (Eigen::Index b = 0; b < B; ++b)
            y.middleRows(b * L, L) = A.middleRows(b * L, L) * Bm.middleRows(b * M, M);
        Var out = push(std::move(y), needs(a) || needs(bm), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>&A2 = T.vals_[a.id], &B2 = T.vals_[bm.id];
            const Mat<S>& go = T.grads_[out.id];
            for (Eigen::Index b = 0; b < B; ++b) {
                if (T.needs(a))
                    T.acc(a).middleRows(b * L, L) +=
                        go.middleRows(b * L, L) * B2.middleRows(b * M, M).transpose();
                if (T.needs(bm))
                    T.acc(bm).middleRows(b * M, M) +=
                        A2.middleRows(b * L, L).transpose() * go.middleRows(b * L, L);
            }
        });
        return out;
    }

    /// out.row(b) = (A_b * v.row(b)^T)^T   (A: (B*L) x M, v: B x M -> B x L)
    Var bmv(Var a, Var v) {
        const Mat<S>&A = val(a), &V = val(v);
        const Eigen::Index B = V.rows();
        detail::require(A.cols() == V.cols() && A.rows() % B == 0, "bmv shapes");
        const Eigen::Index L = A.rows() / B;
        Mat<S> y(B, L);
        for (Eigen::Index b = 0; b < B; ++b)
            y.row(b) = (A.middleRows(b * L, L) * V.row(b).transpose()).transpose();
        Var out = push(std::move(y), needs(a) || needs(v), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>&A2 = T.vals_[a.id], &V2 = T.vals_[v.id];
            const Mat<S>& go = T.grads_[out.id];
            for (Eigen::Index b = 0; b < B; ++b) {
                if (T.needs(a))
                    T.acc(a).middleRows(b * L, L) += go.row(b).transpose() * V2.row(b);
                if (T.needs(v)) T.acc(v).row(b) += go.row(b) * A2.middleRows(b * L, L);
            }
        });
        return out;
    }

    /// Scale stacked rows: out.row(b*L+i) = a.row(b*L+i) * s(b,i).
    Var scale_rows(Var a, Var s) {
        const Mat<S>&A = val(a), &Sm = val(s);
        const Eigen::Index B = Sm.rows(), L = Sm.cols();
        detail::require(A.rows() == B * L, "scale_rows shapes");
        Mat<S> y(A.rows(), A.cols());
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index i = 0; i < L; ++i) y.row(b * L + i) = A.row(b * L + i) * Sm(b, i);
        Var out = push(std::move(y), needs(a) || needs(s), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>&A2 = T.vals_[a.id], &S2 = T.vals_[s.id];
            const Mat<S>& go = T.grads_[out.id];
            for (Eigen::Index b = 0; b < B; ++b)
                for (Eigen::Index i = 0; i < L; ++i) {
                    if (T.needs(a)) T.acc(a).row(b * L + i) += go.row(b * L + i) * S2(b, i);
                    if (T.needs(s)) T.acc(s)(b, i) += go.row(b * L + i).dot(A2.row(b * L + i));
                }
        });
        return out;
    }

    /// Column-wise sums of each example block: out.row(b) = sum_i A.row(b*L+i).
    Var colsum_blocks(Var a, int L) {
        const Mat<S>& A = val(a);
        detail::require(A.rows() % L == 0, "colsum_blocks shape");
        const Eigen::Index B = A.rows() / L;
        Mat<S> y = Mat<S>::Zero(B, A.cols());
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index i = 0; i < L; ++i) y.row(b) += A.row(b * L + i);
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (!T.needs(a)) return;
            const Mat<S>& go = T.grads_[out.id];
            Mat<S>& g = T.acc(a);
            for (Eigen::Index b = 0; b < go.rows(); ++b)
                for (Eigen::Index i = 0; i < L; ++i) g.row(b * L + i) += go.row(b);
        });
        return out;
    }

    /// Scale row r of a by c(r, 0): out = a prescaled by a column vector.
    Var cmul_colvec(Var a, Var c) {
        const Mat<S>&A = val(a), &C = val(c);
        detail::require(C.cols() == 1 && C.rows() == A.rows(), "cmul_colvec shapes");
        Mat<S> y = A.array().colwise() * C.col(0).array();
        Var out = push(std::move(y), needs(a) || needs(c), nullptr);
        record(out, [=](Tape& T) {
            const Mat<S>&A2 = T.vals_[a.id], &C2 = T.vals_[c.id];
            const Mat<S>& go = T.grads_[out.id];
            if (T.needs(a)) T.acc(a) += (go.array().colwise() * C2.col(0).array()).matrix();
            if (T.needs(c)) T.acc(c).col(0) += go.cwiseProduct(A2).rowwise().sum();
        });
        return out;
    }

    // ---- losses ---------------------------------------------------------

    Var sum_all(Var a) {
        Mat<S> y(1, 1);
        y(0, 0) = val(a).sum();
        Var out = push(std::move(y), needs(a), nullptr);
        record(out, [=](Tape& T) {
            if (T.needs(a))
                T.acc(a).array() += T.grads_[out.id](0, 0);
        });
        return out;
    }

    /// Sum of -log softmax(logits)[target] over rows whose target != ignore_id.
    /// The count of contributing rows is written to *rows_used when non-null.
    Var cross_entropy_sum(Var logits, std::vector<int> targets, int ignore_id,
                          long* rows_used = nullptr) {
        const Mat<S>& X = val(logits);
        detail::require(static_cast<Eigen::Index>(targets.size()) == X.rows(),
                        "cross_entropy row/target mismatch");
        Mat<S> probs(X.rows(), X.cols());
        S total = 0;
        long used = 0;
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const S m = X.row(r).maxCoeff();
            Eigen::Matrix<S, 1, Eigen::Dynamic> e = (X.row(r).array() - m).exp();
            const S z = e.sum();
            probs.row(r) = e / z;
            const int t = targets[static_cast<std::size_t>(r)];
            if (t == ignore_id) continue;
            detail::require(t >= 0 && t < X.cols(), "cross_entropy target out of range");
            total += std::log(z) + m - X(r, t);
            ++used;
        }
        if (rows_used) *rows_used = used;
        Mat<S> y(1, 1);
        y(0, 0) = total;
        Var out = push(std::move(y), needs(logits), nullptr);
        if (grad_enabled && needs(logits)) aux_[out.id] = std::move(probs);
        record(out, [=, targets = std::move(targets)](Tape& T) {
            if (!T.needs(logits)) return;
            const S g = T.grads_[out.id](0, 0);
            const Mat<S>& P = T.aux_.at(out.id);
            Mat<S>& ga = T.acc(logits);
            for (Eigen::Index r = 0; r < P.rows(); ++r) {
                const int t = targets[static_cast<std::size_t>(r)];
                if (t == ignore_id) continue;
                ga.row(r) += g * P.row(r);
                ga(r, t) -= g;
            }
        });
        return out;
    }

    // ---- engine ---------------------------------------------------------

    /// Seeds d(root)/d(root) = 1 and sweeps the tape backwards. root must be
    /// 1 x 1. Parameter gradients are accumulated into their sinks.
    void backward(Var root) {
        detail::require(grad_enabled, "backward with grad disabled");
        const Mat<S>& R = val(root);
        detail::require(R.rows() == 1 && R.cols() == 1, "backward root must be scalar");
        grads_.assign(vals_.size(), Mat<S>());
        grads_[root.id] = Mat<S>::Constant(1, 1, S(1));
        for (std::int32_t i = root.id; i >= 0; --i) {
            if (grads_[i].size() == 0) continue; // never reached from the root
            if (backs_[i]) backs_[i](*this);
            if (sinks_[i]) *sinks_[i] += grads_[i];
        }
    }

private:
    std::vector<Mat<S>> vals_;
    std::vector<Mat<S>> grads_;
    std::vector<std::function<void(Tape&)>> backs_;
    std::vector<bool> needs_;
    std::vector<Mat<S>*> sinks_;
    std::unordered_map<std::int32_t, Mat<S>> aux_;      // cached forward byproducts
    std::unordered_map<std::int32_t, Vec<S>> aux_vec_;

    bool needs(Var v) const { return needs_[v.id]; }

    Mat<S>& acc(Var v) {
        Mat<S>& g = grads_[v.id];
        if (g.size() == 0) g = Mat<S>::Zero(vals_[v.id].rows(), vals_[v.id].cols());
        return g;
    }

    Var push(Mat<S> m, bool needs_grad, Mat<S>* sink) {
        vals_.push_back(std::move(m));
        backs_.emplace_back();
        needs_.push_back(needs_grad && grad_enabled);
        sinks_.push_back(sink);
        return Var{static_cast<std::int32_t>(vals_.size() - 1)};
    }

    template <class F>
    void record(Var out, F&& f) {
        if (grad_enabled && needs_[out.id]) backs_[out.id] = std::forward<F>(f);
    }

    static Mat<S> rowwise_softmax(const Mat<S>& x) {
        Mat<S> y(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const S m = x.row(r).maxCoeff();
            Eigen::Matrix<S, 1, Eigen::Dynamic> e = (x.row(r).array() - m).exp();
            y.row(r) = e / e.sum();
        }
        return y;
    }
};

// ---- parameters ----------------------------------------------------------

template <class S>
struct ParamEntry {
    std::string name;
    Mat<S> value;
    Mat<S> grad;
    Mat<S> m, v;       // Adam moments, allocated by the optimiser
    S weight_decay = 0; // decoupled decay coefficient, 0 = none
};

template <class S>
class ParameterStore {
public:
    ParamEntry<S>& add(const std::string& name, int rows, int cols) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter: " + name);
        index_[name] = entries_.size();
        entries_.push_back(std::make_unique<ParamEntry<S>>());
        auto& e = *entries_.back();
        e.name = name;
        e.value = Mat<S>::Zero(rows, cols);
        e.grad = Mat<S>::Zero(rows, cols);
        return e;
    }

    ParamEntry<S>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::logic_error("unknown parameter: " + name);
        return *entries_[it->second];
    }
    const ParamEntry<S>& at(const std::string& name) const {
        return const_cast<ParameterStore*>(this)->at(name);
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t count() const { return entries_.size(); }
    ParamEntry<S>& entry(std::size_t i) { return *entries_[i]; }
    const ParamEntry<S>& entry(std::size_t i) const { return *entries_[i]; }

    long scalar_count() const {
        long n = 0;
        for (const auto& e : entries_) n += static_cast<long>(e->value.size());
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) e->grad.setZero();
    }

    /// Lease onto a tape: value copied in, gradient accumulated back out.
    Var lease(Tape<S>& tape, const std::string& name) {
        auto& e = at(name);
        return tape.param(e.value, &e.grad);
    }

private:
    std::vector<std::unique_ptr<ParamEntry<S>>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Uniform(-bound, bound) fill with bound = 1/sqrt(fan_in), the usual
/// fan-in scaling.
template <class S, class R>
void init_uniform(ParamEntry<S>& e, int fan_in, R& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
    for (Eigen::Index i = 0; i < e.value.rows(); ++i)
        for (Eigen::Index j = 0; j < e.value.cols(); ++j)
            e.value(i, j) = static_cast<S>((rng.uniform() * 2.0 - 1.0) * bound);
}

} // namespace permnet
