#pragma once

// Transformer encoder-decoder baseline: pre-norm residual blocks, sinusoidal
// positions, causal target mask. Head width is floor(d_model/heads) (min 1)
// so head counts that do not divide d_model still work; the output projection
// maps the concatenated heads back to d_model.

#include "permnet/model.hpp"
#include "permnet/rng.hpp"

namespace permnet {

template <class S>
class TransformerSeq2Seq final : public SeqModel<S> {
public:
    struct Options {
        int d_model = 64;
        int layers = 2;
        int heads = 4;
        int ffn = 256;
    };

    TransformerSeq2Seq(DataShape shape, Options opt) : shape_(shape), opt_(opt) {
        const int D = opt_.d_model, V = shape_.vocab_size;
        dk_ = std::max(1, D / std::max(1, opt_.heads));
        const int W = dk_ * opt_.heads;
        store_.add("embed", V, D);
        for (int l = 0; l < opt_.layers; ++l) {
            add_block(enc_name(l, "self"), D, W);
            add_ffn(enc_name(l, "ffn"), D);
            add_block(dec_name(l, "self"), D, W);
            add_block(dec_name(l, "cross"), D, W);
            add_ffn(dec_name(l, "ffn"), D);
        }
        store_.add("encfinal.g", 1, D);
        store_.add("encfinal.b", 1, D);
        store_.add("final.g", 1, D);
        store_.add("final.b", 1, D);
        store_.add("out.w", D, V);
        store_.add("out.b", 1, V);
    }

    void init(Rng& rng) {
        const int D = opt_.d_model;
        init_uniform(store_.at("embed"), D, rng);
        for (std::size_t i = 0; i < store_.count(); ++i) {
            auto& e = store_.entry(i);
            if (e.name == "embed") continue;
            if (e.name.ends_with(".g")) {
                e.value.setOnes();
            } else if (e.name.ends_with(".b") && e.value.rows() == 1 &&
                       e.name.find("out.") == std::string::npos) {
                e.value.setZero();
            } else {
                init_uniform(e, static_cast<int>(e.value.rows()), rng);
            }
        }
    }

    std::string kind() const override { return "transformer"; }
    ParameterStore<S>& params() override { return store_; }
    const Options& options() const { return opt_; }

    LossInfo loss(Tape<S>& t, const Batch& batch, bool teacher = true) override {
        Var enc = encode(t, batch);
        LossInfo info;
        if (teacher) {
            const int B = batch.rows(), T = batch.tgt_cols();
            IMat dec_in = batch.tgt.leftCols(T - 1);
            Var logits = decode(t, enc, batch, dec_in); // (B*(T-1)) x V
            std::vector<int> targets(static_cast<std::size_t>(B) * (T - 1));
            for (int b = 0; b < B; ++b)
                for (int p = 0; p + 1 < T; ++p)
                    targets[static_cast<std::size_t>(b) * (T - 1) + p] = batch.tgt(b, p + 1);
            long used = 0;
            info.loss = t.cross_entropy_sum(logits, std::move(targets), Vocabulary::kPad, &used);
            info.tokens = used;
            return info;
        }
        // Free-running loss: extend the prefix with the model's own argmax.
        const int B = batch.rows(), T = batch.tgt_cols();
        IMat prefix = IMat::Constant(B, 1, Vocabulary::kSos);
        for (int step = 0; step + 1 < T; ++step) {
            Var logits = decode(t, enc, batch, prefix);
            Var last = last_position_rows(t, logits, B, step + 1);
            long used = 0;
            Var ce = t.cross_entropy_sum(last, target_column(batch, step + 1),
                                         Vocabulary::kPad, &used);
            info.tokens += used;
            info.loss = info.loss.valid() ? t.add(info.loss, ce) : ce;
            std::vector<int> em = argmax_rows(t.val(last));
            prefix.conservativeResize(Eigen::NoChange, prefix.cols() + 1);
            for (int b = 0; b < B; ++b)
                prefix(b, prefix.cols() - 1) = em[static_cast<std::size_t>(b)];
        }
        return info;
    }

    std::vector<std::vector<int>> greedy(const Batch& batch, int max_steps) override {
        Tape<S> t;
        t.grad_enabled = false;
        Var enc = encode(t, batch);
        const int B = batch.rows();
        std::vector<std::vector<int>> out(static_cast<std::size_t>(B));
        std::vector<bool> done(static_cast<std::size_t>(B), false);
        IMat prefix = IMat::Constant(B, 1, Vocabulary::kSos);
        for (int step = 0; step < max_steps; ++step) {
            Var logits = decode(t, enc, batch, prefix);
            Var last = last_position_rows(t, logits, B, step + 1);
            std::vector<int> em = argmax_rows(t.val(last));
            prefix.conservativeResize(Eigen::NoChange, prefix.cols() + 1);
            bool all_done = true;
            for (int b = 0; b < B; ++b) {
                auto bi = static_cast<std::size_t>(b);
                if (!done[bi]) {
                    out[bi].push_back(em[bi]);
                    if (em[bi] == Vocabulary::kEos) done[bi] = true;
                }
                prefix(b, prefix.cols() - 1) = em[bi];
                all_done = all_done && done[bi];
            }
            if (all_done) break;
        }
        return out;
    }

    /// Teacher-forced logits for one batch (used by the causal-mask test).
    Mat<S> forced_logits(const Batch& batch) {
        Tape<S> t;
        t.grad_enabled = false;
        Var enc = encode(t, batch);
        IMat dec_in = batch.tgt.leftCols(batch.tgt_cols() - 1);
        return t.val(decode(t, enc, batch, dec_in));
    }

private:
    static std::string enc_name(int l, const char* part) {
        return "enc" + std::to_string(l) + "." + part;
    }
    static std::string dec_name(int l, const char* part) {
        return "dec" + std::to_string(l) + "." + part;
    }

    void add_block(const std::string& p, int D, int W) {
        store_.add(p + ".ln.g", 1, D);
        store_.add(p + ".ln.b", 1, D);
        store_.add(p + ".wq", D, W);
        store_.add(p + ".wk", D, W);
        store_.add(p + ".wv", D, W);
        store_.add(p + ".wo", W, D);
    }
    void add_ffn(const std::string& p, int D) {
        store_.add(p + ".ln.g", 1, D);
        store_.add(p + ".ln.b", 1, D);
        store_.add(p + ".w1", D, opt_.ffn);
        store_.add(p + ".b1", 1, opt_.ffn);
        store_.add(p + ".w2", opt_.ffn, D);
        store_.add(p + ".b2", 1, D);
    }

    Mat<S> positional(int L) const {
        const int D = opt_.d_model;
        Mat<S> pe(L, D);
        for (int p = 0; p < L; ++p)
            for (int i = 0; i < D; ++i) {
                const double angle = p / std::pow(10000.0, 2.0 * (i / 2) / D);
                pe(p, i) = static_cast<S>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
            }
        return pe;
    }

    Var embed_sequence(Tape<S>& t, Var table, const IMat& ids) {
        const int B = static_cast<int>(ids.rows()), L = static_cast<int>(ids.cols());
        std::vector<int> flat(static_cast<std::size_t>(B) * L);
        for (int b = 0; b < B; ++b)
            for (int p = 0; p < L; ++p)
                flat[static_cast<std::size_t>(b) * L + p] = ids(b, p);
        Var x = t.scale(t.rows_embed(table, std::move(flat)),
                        static_cast<S>(std::sqrt(double(opt_.d_model))));
        Mat<S> pe = positional(L);
        Mat<S> tiled(Eigen::Index(B) * L, opt_.d_model);
        for (int b = 0; b < B; ++b) tiled.middleRows(Eigen::Index(b) * L, L) = pe;
        return t.add(x, t.constant(std::move(tiled)));
    }

    Var mha(Tape<S>& t, const std::string& p, Var x, Var kv, int Lq, int Lk,
            const Mat<S>& add_mask) {
        Var g = store_.lease(t, p + ".ln.g"), b = store_.lease(t, p + ".ln.b");
        Var xn = t.layer_norm_rows(x, g, b, S(1e-5));
        Var kn = xn;
        if (kv.valid()) kn = kv; // cross attention: keys/values precomputed (already normed)
        Var q = t.matmul(xn, store_.lease(t, p + ".wq"));
        Var k = t.matmul(kn, store_.lease(t, p + ".wk"));
        Var v = t.matmul(kn, store_.lease(t, p + ".wv"));
        Var mask = t.constant(add_mask);
        std::vector<Var> heads;
        const S inv = static_cast<S>(1.0 / std::sqrt(double(dk_)));
        for (int hd = 0; hd < opt_.heads; ++hd) {
            Var qh = t.slice_cols(q, hd * dk_, dk_);
            Var kh = t.slice_cols(k, hd * dk_, dk_);
            Var vh = t.slice_cols(v, hd * dk_, dk_);
            Var scores = t.add(t.scale(t.bmm_nt(qh, kh, Lq, Lk), inv), mask);
            heads.push_back(t.bmm_nn(t.softmax_rows(scores), vh, Lq, Lk));
        }
        Var cat = heads[0];
        for (std::size_t i = 1; i < heads.size(); ++i) cat = t.concat_cols(cat, heads[i]);
        return t.add(x, t.matmul(cat, store_.lease(t, p + ".wo")));
    }

    Var ffn(Tape<S>& t, const std::string& p, Var x) {
        Var g = store_.lease(t, p + ".ln.g"), b = store_.lease(t, p + ".ln.b");
        Var xn = t.layer_norm_rows(x, g, b, S(1e-5));
        Var hmid = t.relu(t.linear(xn, store_.lease(t, p + ".w1"), store_.lease(t, p + ".b1")));
        return t.add(x, t.linear(hmid, store_.lease(t, p + ".w2"), store_.lease(t, p + ".b2")));
    }

    static Mat<S> pad_mask_rows(const Batch& batch, int Lq) {
        const int B = batch.rows(), Lk = batch.src_cols();
        Mat<S> m = Mat<S>::Zero(Eigen::Index(B) * Lq, Lk);
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < Lq; ++i)
                for (int j = batch.src_len[static_cast<std::size_t>(b)]; j < Lk; ++j)
                    m(Eigen::Index(b) * Lq + i, j) = S(-1e9);
        return m;
    }

    Var encode(Tape<S>& t, const Batch& batch) {
        const int L = batch.src_cols();
        Var embed = store_.lease(t, "embed");
        Var x = embed_sequence(t, embed, batch.src);
        embed_ = embed;
        Mat<S> mask = pad_mask_rows(batch, L);
        for (int l = 0; l < opt_.layers; ++l) {
            x = mha(t, enc_name(l, "self"), x, Var{}, L, L, mask);
            x = ffn(t, enc_name(l, "ffn"), x);
        }
        return t.layer_norm_rows(x, store_.lease(t, "encfinal.g"),
                                 store_.lease(t, "encfinal.b"), S(1e-5));
    }

    /// dec_in: B x T token ids; returns (B*T) x V logits.
    Var decode(Tape<S>& t, Var enc, const Batch& batch, const IMat& dec_in) {
        const int B = batch.rows(), T = static_cast<int>(dec_in.cols());
        const int L = batch.src_cols();
        Var x = embed_sequence(t, embed_, dec_in);
        Mat<S> causal = Mat<S>::Zero(Eigen::Index(B) * T, T);
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < T; ++i)
                for (int j = i + 1; j < T; ++j) causal(Eigen::Index(b) * T + i, j) = S(-1e9);
        Mat<S> cross = pad_mask_rows(batch, T);
        for (int l = 0; l < opt_.layers; ++l) {
            x = mha(t, dec_name(l, "self"), x, Var{}, T, T, causal);
            x = mha(t, dec_name(l, "cross"), x, enc, T, L, cross);
            x = ffn(t, dec_name(l, "ffn"), x);
        }
        Var xn = t.layer_norm_rows(x, store_.lease(t, "final.g"), store_.lease(t, "final.b"),
                                   S(1e-5));
        return t.linear(xn, store_.lease(t, "out.w"), store_.lease(t, "out.b"));
    }

    /// Pull rows at the last position of each example block: (B*T) x V -> B x V.
    Var last_position_rows(Tape<S>& t, Var logits, int B, int T) {
        std::vector<int> rows(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) rows[static_cast<std::size_t>(b)] = b * T + (T - 1);
        return t.pick_rows(logits, std::move(rows));
    }

    DataShape shape_;
    Options opt_;
    int dk_ = 1;
    ParameterStore<S> store_;
    Var embed_;
};

} // namespace permnet
