#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mapdlab/errors.hpp"
#include "mapdlab/tensor.hpp"

namespace mapd {

// Handle to a node on a specific tape.
struct Var {
    int id = -1;
    const void* owner = nullptr;
    bool valid() const { return id >= 0; }
};

enum class Trainable : bool { no = false, yes = true };

// Reverse-mode tape. Forward ops append nodes in topological order and
// record a backward closure; backward() walks nodes in exact reverse
// creation order. Every forward result is checked for non-finite values
// and the offending op is named in the error.
//
// A tape and its tensors belong to one worker. Independent tapes may run
// concurrently; there is no shared mutable state between them.
template <typename S>
class Tape {
  public:
    using GradMap = std::unordered_map<int, Tensor<S>>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- leaves ------------------------------------------------------

    Var leaf(Tensor<S> value, Trainable trainable) {
        Node n;
        n.value = std::move(value);
        n.is_leaf = true;
        n.trainable = (trainable == Trainable::yes);
        n.op = "leaf";
        return push(std::move(n), /*check_finite=*/false);
    }

    Var constant(Tensor<S> value) { return leaf(std::move(value), Trainable::no); }

    const Tensor<S>& value(Var v) const { return nodes_[check(v)].value; }

    std::size_t size() const { return nodes_.size(); }

    // ---- elementwise -------------------------------------------------

    Var add(Var a, Var b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        require_same_shape("add", ta, tb);
        Tensor<S> out = ta;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
        return unary_binary("add", std::move(out), {a, b},
                            [](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                t.accumulate(ps[0], g);
                                t.accumulate(ps[1], g);
                            });
    }

    Var sub(Var a, Var b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        require_same_shape("sub", ta, tb);
        Tensor<S> out = ta;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
        return unary_binary("sub", std::move(out), {a, b},
                            [](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                t.accumulate(ps[0], g);
                                Tensor<S> ng = g;
                                for (auto& v : ng.data) v = -v;
                                t.accumulate(ps[1], ng);
                            });
    }

    Var mul(Var a, Var b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        require_same_shape("mul", ta, tb);
        Tensor<S> out = ta;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
        return unary_binary("mul", std::move(out), {a, b},
                            [](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                const auto& va = t.value(ps[0]);
                                const auto& vb = t.value(ps[1]);
                                Tensor<S> ga = g, gb = g;
                                for (std::size_t i = 0; i < g.data.size(); ++i) {
                                    ga.data[i] *= vb.data[i];
                                    gb.data[i] *= va.data[i];
                                }
                                t.accumulate(ps[0], ga);
                                t.accumulate(ps[1], gb);
                            });
    }

    Var scale(Var a, S c) {
        Tensor<S> out = value(a);
        for (auto& v : out.data) v *= c;
        return unary_binary("scale", std::move(out), {a},
                            [c](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                Tensor<S> ga = g;
                                for (auto& v : ga.data) v *= c;
                                t.accumulate(ps[0], ga);
                            });
    }

    // broadcast-add a row vector [1 x c] to every row of x [r x c]
    Var add_rowvec(Var x, Var row) {
        const auto& tx = value(x);
        const auto& tr = value(row);
        if (tr.numel() != tx.cols())
            throw ShapeError("add_rowvec: row " + tr.shape_str() + " vs x " + tx.shape_str());
        Tensor<S> out = tx;
        for (std::int64_t i = 0; i < tx.rows(); ++i)
            for (std::int64_t j = 0; j < tx.cols(); ++j) out.at(i, j) += tr.data[static_cast<std::size_t>(j)];
        return unary_binary("add_rowvec", std::move(out), {x, row},
                            [](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                t.accumulate(ps[0], g);
                                Tensor<S> gr({1, g.cols()});
                                for (std::int64_t i = 0; i < g.rows(); ++i)
                                    for (std::int64_t j = 0; j < g.cols(); ++j)
                                        gr.data[static_cast<std::size_t>(j)] += g.at(i, j);
                                t.accumulate(ps[1], gr);
                            });
    }

    Var gelu(Var a) {
        const auto& ta = value(a);
        Tensor<S> out = ta;
        for (auto& v : out.data) {
            const double x = static_cast<double>(v);
            v = static_cast<S>(0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)));
        }
        return unary_binary("gelu", std::move(out), {a},
                            [](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                const auto& va = t.value(ps[0]);
                                Tensor<S> ga = g;
                                for (std::size_t i = 0; i < g.data.size(); ++i) {
                                    const double x = static_cast<double>(va.data[i]);
                                    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
                                    const double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
                                    ga.data[i] *= static_cast<S>(cdf + x * pdf);
                                }
                                t.accumulate(ps[0], ga);
                            });
    }

    // ---- matrix ops --------------------------------------------------

    Var matmul(Var a, Var b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        if (ta.cols() != tb.rows())
            throw ShapeError("matmul: inner dimensions disagree, " + ta.shape_str() + " vs " +
                             tb.shape_str());
        Tensor<S> out;
        kernels::matmul(ta, tb, out);
        return unary_binary("matmul", std::move(out), {a, b},
                            [](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                // da = g . b^T ; db = a^T . g
                                if (t.wants_grad(ps[0])) {
                                    Tensor<S> da;
                                    kernels::matmul_nt(g, t.value(ps[1]), da);
                                    t.accumulate_move(ps[0], std::move(da));
                                }
                                if (t.wants_grad(ps[1])) {
                                    Tensor<S> db;
                                    kernels::matmul_tn(t.value(ps[0]), g, db);
                                    t.accumulate_move(ps[1], std::move(db));
                                }
                            });
    }

    // a . b^T, where b is [c x k]
    Var matmul_nt(Var a, Var b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        if (ta.cols() != tb.cols())
            throw ShapeError("matmul_nt: inner dimensions disagree, " + ta.shape_str() + " vs " +
                             tb.shape_str());
        Tensor<S> out;
        kernels::matmul_nt(ta, tb, out);
        return unary_binary("matmul_nt", std::move(out), {a, b},
                            [](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                // out = a . b^T : da = g . b ; db = g^T . a
                                if (t.wants_grad(ps[0])) {
                                    Tensor<S> da;
                                    kernels::matmul(g, t.value(ps[1]), da);
                                    t.accumulate_move(ps[0], std::move(da));
                                }
                                if (t.wants_grad(ps[1])) {
                                    Tensor<S> db;
                                    kernels::matmul_tn(g, t.value(ps[0]), db);
                                    t.accumulate_move(ps[1], std::move(db));
                                }
                            });
    }

    Var transpose(Var a) {
        Tensor<S> out = kernels::transpose(value(a));
        return unary_binary("transpose", std::move(out), {a},
                            [](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                t.accumulate_move(ps[0], kernels::transpose(g));
                            });
    }

    Var reshape(Var a, std::vector<std::int64_t> dims) {
        const auto& ta = value(a);
        if (Tensor<S>::numel_of(dims) != ta.numel())
            throw ShapeError("reshape: element count mismatch, " + ta.shape_str());
        Tensor<S> out = ta;
        out.shape = dims;
        auto old_shape = ta.shape;
        return unary_binary("reshape", std::move(out), {a},
                            [old_shape](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                Tensor<S> ga = g;
                                ga.shape = old_shape;
                                t.accumulate_move(ps[0], std::move(ga));
                            });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw UsageError("concat_rows: no inputs");
        std::int64_t rows = 0;
        const std::int64_t cols = value(parts[0]).cols();
        for (Var p : parts) {
            if (value(p).cols() != cols)
                throw ShapeError("concat_rows: column mismatch " + value(p).shape_str());
            rows += value(p).rows();
        }
        Tensor<S> out({rows, cols});
        std::int64_t r = 0;
        std::vector<std::int64_t> offsets;
        for (Var p : parts) {
            offsets.push_back(r);
            const auto& tp = value(p);
            std::copy(tp.data.begin(), tp.data.end(), out.data.begin() + r * cols);
            r += tp.rows();
        }
        return unary_binary("concat_rows", std::move(out), parts,
                            [offsets](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                for (std::size_t i = 0; i < ps.size(); ++i) {
                                    if (!t.wants_grad(ps[i])) continue;
                                    const auto& tp = t.value(ps[i]);
                                    Tensor<S> gp({tp.rows(), tp.cols()});
                                    std::copy(g.data.begin() + offsets[i] * g.cols(),
                                              g.data.begin() + (offsets[i] + tp.rows()) * g.cols(),
                                              gp.data.begin());
                                    t.accumulate_move(ps[i], std::move(gp));
                                }
                            });
    }

    Var slice_rows(Var a, std::int64_t r0, std::int64_t r1) {
        const auto& ta = value(a);
        if (r0 < 0 || r1 > ta.rows() || r0 > r1)
            throw ShapeError("slice_rows: range out of bounds for " + ta.shape_str());
        Tensor<S> out({r1 - r0, ta.cols()});
        std::copy(ta.data.begin() + r0 * ta.cols(), ta.data.begin() + r1 * ta.cols(),
                  out.data.begin());
        const std::int64_t rows = ta.rows();
        return unary_binary("slice_rows", std::move(out), {a},
                            [r0, rows](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                Tensor<S> ga({rows, g.cols()});
                                std::copy(g.data.begin(), g.data.end(),
                                          ga.data.begin() + r0 * g.cols());
                                t.accumulate_move(ps[0], std::move(ga));
                            });
    }

    // ---- normalization and activations --------------------------------

    Var softmax_rows(Var a) {
        const auto& ta = value(a);
        Tensor<S> out = ta;
        softmax_rows_forward(out, /*order_independent=*/false);
        Tensor<S> saved = out;
        return unary_binary("softmax_rows", std::move(out), {a},
                            [saved](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                Tensor<S> ga = g;
                                const std::int64_t r = saved.rows(), c = saved.cols();
                                for (std::int64_t i = 0; i < r; ++i) {
                                    const S* y = saved.row_ptr(i);
                                    S* gr = ga.row_ptr(i);
                                    S dot = S(0);
                                    for (std::int64_t j = 0; j < c; ++j) dot += gr[j] * y[j];
                                    for (std::int64_t j = 0; j < c; ++j) gr[j] = y[j] * (gr[j] - dot);
                                }
                                t.accumulate_move(ps[0], std::move(ga));
                            });
    }

    // row-wise layer normalization with learnable gain/bias rows [1 x d]
    Var layer_norm(Var x, Var gain, Var bias, S eps = S(1e-5)) {
        const auto& tx = value(x);
        const std::int64_t r = tx.rows(), c = tx.cols();
        if (value(gain).numel() != c || value(bias).numel() != c)
            throw ShapeError("layer_norm: gain/bias must have " + std::to_string(c) + " entries");
        Tensor<S> xhat({r, c});
        Tensor<S> inv_std({r, 1});
        Tensor<S> out({r, c});
        const auto& g = value(gain);
        const auto& b = value(bias);
        for (std::int64_t i = 0; i < r; ++i) {
            const S* row = tx.row_ptr(i);
            S mean = S(0);
            for (std::int64_t j = 0; j < c; ++j) mean += row[j];
            mean /= static_cast<S>(c);
            S var = S(0);
            for (std::int64_t j = 0; j < c; ++j) {
                const S d = row[j] - mean;
                var += d * d;
            }
            var /= static_cast<S>(c);
            const S is = S(1) / std::sqrt(var + eps);
            inv_std.data[static_cast<std::size_t>(i)] = is;
            for (std::int64_t j = 0; j < c; ++j) {
                const S xh = (row[j] - mean) * is;
                xhat.at(i, j) = xh;
                out.at(i, j) = xh * g.data[static_cast<std::size_t>(j)] + b.data[static_cast<std::size_t>(j)];
            }
        }
        return unary_binary(
            "layer_norm", std::move(out), {x, gain, bias},
            [xhat, inv_std](Tape& t, const Tensor<S>& go, const std::vector<Var>& ps) {
                const std::int64_t r = xhat.rows(), c = xhat.cols();
                const auto& g = t.value(ps[1]);
                if (t.wants_grad(ps[1]) || t.wants_grad(ps[2])) {
                    Tensor<S> ggain({1, c});
                    Tensor<S> gbias({1, c});
                    for (std::int64_t i = 0; i < r; ++i)
                        for (std::int64_t j = 0; j < c; ++j) {
                            ggain.data[static_cast<std::size_t>(j)] += go.at(i, j) * xhat.at(i, j);
                            gbias.data[static_cast<std::size_t>(j)] += go.at(i, j);
                        }
                    t.accumulate_move(ps[1], std::move(ggain));
                    t.accumulate_move(ps[2], std::move(gbias));
                }
                if (t.wants_grad(ps[0])) {
                    Tensor<S> gx({r, c});
                    for (std::int64_t i = 0; i < r; ++i) {
                        // dxhat = go * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                        S m1 = S(0), m2 = S(0);
                        const S is = inv_std.data[static_cast<std::size_t>(i)];
                        for (std::int64_t j = 0; j < c; ++j) {
                            const S dxh = go.at(i, j) * g.data[static_cast<std::size_t>(j)];
                            m1 += dxh;
                            m2 += dxh * xhat.at(i, j);
                        }
                        m1 /= static_cast<S>(c);
                        m2 /= static_cast<S>(c);
                        for (std::int64_t j = 0; j < c; ++j) {
                            const S dxh = go.at(i, j) * g.data[static_cast<std::size_t>(j)];
                            gx.at(i, j) = (dxh - m1 - xhat.at(i, j) * m2) * is;
                        }
                    }
                    t.accumulate_move(ps[0], std::move(gx));
                }
            });
    }

    // ---- lookup and loss ----------------------------------------------

    Var gather_rows(Var table, const std::vector<int>& ids) {
        const auto& tt = value(table);
        Tensor<S> out({static_cast<std::int64_t>(ids.size()), tt.cols()});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= tt.rows())
                throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " out of range [0," +
                                 std::to_string(tt.rows()) + ")");
            std::copy(tt.row_ptr(ids[i]), tt.row_ptr(ids[i]) + tt.cols(), out.row_ptr(static_cast<std::int64_t>(i)));
        }
        return unary_binary("gather_rows", std::move(out), {table},
                            [ids](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                if (!t.wants_grad(ps[0])) return;
                                const auto& tt = t.value(ps[0]);
                                Tensor<S> gt({tt.rows(), tt.cols()});
                                for (std::size_t i = 0; i < ids.size(); ++i) {
                                    const S* src = g.row_ptr(static_cast<std::int64_t>(i));
                                    S* dst = gt.row_ptr(ids[i]);
                                    for (std::int64_t j = 0; j < g.cols(); ++j) dst[j] += src[j];
                                }
                                t.accumulate_move(ps[0], std::move(gt));
                            });
    }

    // Weighted mean of -log softmax(logits)[t, target_t] over positions with
    // nonzero mask. Fused and numerically stabilized.
    Var cross_entropy_logits(Var logits, const std::vector<int>& targets,
                             const std::vector<S>& mask) {
        const auto& lg = value(logits);
        const std::int64_t T = lg.rows(), V = lg.cols();
        if (static_cast<std::int64_t>(targets.size()) != T ||
            static_cast<std::int64_t>(mask.size()) != T)
            throw ShapeError("cross_entropy_logits: targets/mask length must equal " +
                             std::to_string(T));
        S mass = S(0);
        for (S w : mask) mass += w;
        if (!(mass > S(0))) throw UsageError("cross_entropy_logits: mask selects no positions");

        // softmax rows are saved for the backward pass
        Tensor<S> probs = lg;
        softmax_rows_forward(probs, false);
        double loss = 0.0;
        for (std::int64_t t = 0; t < T; ++t) {
            if (mask[static_cast<std::size_t>(t)] == S(0)) continue;
            const int y = targets[static_cast<std::size_t>(t)];
            if (y < 0 || y >= V)
                throw IndexError("cross_entropy_logits: target id " + std::to_string(y) +
                                 " out of range [0," + std::to_string(V) + ")");
            // recompute the log-prob from logits for precision
            const S* row = lg.row_ptr(t);
            S mx = row[0];
            for (std::int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            double lse = 0.0;
            for (std::int64_t j = 0; j < V; ++j) lse += std::exp(static_cast<double>(row[j] - mx));
            const double logp = static_cast<double>(row[y] - mx) - std::log(lse);
            loss -= static_cast<double>(mask[static_cast<std::size_t>(t)]) * logp;
        }
        loss /= static_cast<double>(mass);
        Tensor<S> out = Tensor<S>::scalar(static_cast<S>(loss));
        Tensor<S> saved_probs = std::move(probs);
        std::vector<S> msk = mask;
        std::vector<int> tgt = targets;
        return unary_binary(
            "cross_entropy_logits", std::move(out), {logits},
            [saved_probs, msk, tgt, mass](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                if (!t.wants_grad(ps[0])) return;
                const S gscale = g.data[0] / mass;
                Tensor<S> gl = saved_probs;
                for (std::int64_t i = 0; i < gl.rows(); ++i) {
                    const S w = msk[static_cast<std::size_t>(i)];
                    S* row = gl.row_ptr(i);
                    if (w == S(0)) {
                        for (std::int64_t j = 0; j < gl.cols(); ++j) row[j] = S(0);
                        continue;
                    }
                    row[tgt[static_cast<std::size_t>(i)]] -= S(1);
                    for (std::int64_t j = 0; j < gl.cols(); ++j) row[j] *= w * gscale;
                }
                t.accumulate_move(ps[0], std::move(gl));
            });
    }

    Var sum_all(Var a) {
        const auto& ta = value(a);
        S s = S(0);
        for (S v : ta.data) s += v;
        auto shape = ta.shape;
        return unary_binary("sum_all", Tensor<S>::scalar(s), {a},
                            [shape](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                Tensor<S> ga(shape, g.data[0]);
                                t.accumulate_move(ps[0], std::move(ga));
                            });
    }

    Var mean_all(Var a) {
        const auto& ta = value(a);
        const S n = static_cast<S>(ta.numel());
        S s = S(0);
        for (S v : ta.data) s += v;
        auto shape = ta.shape;
        return unary_binary("mean_all", Tensor<S>::scalar(s / n), {a},
                            [shape, n](Tape& t, const Tensor<S>& g, const std::vector<Var>& ps) {
                                Tensor<S> ga(shape, g.data[0] / n);
                                t.accumulate_move(ps[0], std::move(ga));
                            });
    }

    // ---- fused multi-head attention -----------------------------------

    struct AttentionOptions {
        int num_heads = 1;
        bool causal = false;
        // exact order-independent context reductions (used by the mapper so
        // that patch permutations leave the output bit-identical)
        bool order_independent = false;
        // when set, post-softmax attention matrices [T x T] are appended
        // per head in layer-major order
        std::vector<Tensor<S>>* capture = nullptr;
    };

    // q, k, v: [T x d_model]; returns [T x d_model]. Scores are scaled by
    // 1/sqrt(d_head) per head.
    Var multihead_attention(Var q, Var k, Var v, const AttentionOptions& opt) {
        const auto& tq = value(q);
        const auto& tk = value(k);
        const auto& tv = value(v);
        if (!tq.same_shape(tk) || !tq.same_shape(tv))
            throw ShapeError("multihead_attention: q/k/v shapes disagree, " + tq.shape_str() +
                             " vs " + tk.shape_str() + " vs " + tv.shape_str());
        const std::int64_t T = tq.rows(), D = tq.cols();
        const int H = opt.num_heads;
        if (H <= 0 || D % H != 0)
            throw ConfigError("multihead_attention: d_model " + std::to_string(D) +
                              " not divisible by num_heads " + std::to_string(H));
        const std::int64_t dh = D / H;
        const S scl = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

        Tensor<S> out({T, D});
        // saved per-head post-softmax attention for the backward pass
        auto attn = std::make_shared<std::vector<Tensor<S>>>();
        attn->reserve(static_cast<std::size_t>(H));

        std::vector<double> terms(static_cast<std::size_t>(T));
        for (int h = 0; h < H; ++h) {
            const std::int64_t c0 = h * dh;
            Tensor<S> a({T, T});
            // scores: dot over the head's feature slice (order-safe)
            for (std::int64_t i = 0; i < T; ++i) {
                const S* qi = tq.row_ptr(i) + c0;
                const std::int64_t jmax = opt.causal ? i + 1 : T;
                S* arow = a.row_ptr(i);
                for (std::int64_t j = 0; j < jmax; ++j) {
                    const S* kj = tk.row_ptr(j) + c0;
                    S acc = S(0);
                    for (std::int64_t p = 0; p < dh; ++p) acc += qi[p] * kj[p];
                    arow[j] = acc * scl;
                }
                MacCounter::add(static_cast<std::uint64_t>(jmax) * dh);
                // softmax over [0, jmax)
                S mx = arow[0];
                for (std::int64_t j = 1; j < jmax; ++j) mx = std::max(mx, arow[j]);
                if (opt.order_independent) {
                    for (std::int64_t j = 0; j < jmax; ++j) {
                        arow[j] = std::exp(arow[j] - mx);
                        terms[static_cast<std::size_t>(j)] = static_cast<double>(arow[j]);
                    }
                    const S denom = static_cast<S>(
                        order_independent_sum(terms.data(), static_cast<std::size_t>(jmax)));
                    for (std::int64_t j = 0; j < jmax; ++j) arow[j] /= denom;
                } else {
                    S denom = S(0);
                    for (std::int64_t j = 0; j < jmax; ++j) {
                        arow[j] = std::exp(arow[j] - mx);
                        denom += arow[j];
                    }
                    for (std::int64_t j = 0; j < jmax; ++j) arow[j] /= denom;
                }
                for (std::int64_t j = jmax; j < T; ++j) arow[j] = S(0);
            }
            // context: out[i, c0:c0+dh] = sum_j a[i,j] * v[j, c0:c0+dh]
            if (opt.order_independent) {
                for (std::int64_t i = 0; i < T; ++i) {
                    const S* arow = a.row_ptr(i);
                    S* orow = out.row_ptr(i) + c0;
                    for (std::int64_t p = 0; p < dh; ++p) {
                        for (std::int64_t j = 0; j < T; ++j)
                            terms[static_cast<std::size_t>(j)] =
                                static_cast<double>(arow[j]) *
                                static_cast<double>(tv.at(j, c0 + p));
                        orow[p] = static_cast<S>(
                            order_independent_sum(terms.data(), static_cast<std::size_t>(T)));
                    }
                }
                MacCounter::add(static_cast<std::uint64_t>(T) * T * dh);
            } else {
                for (std::int64_t i = 0; i < T; ++i) {
                    const S* arow = a.row_ptr(i);
                    S* orow = out.row_ptr(i) + c0;
                    for (std::int64_t p = 0; p < dh; ++p) orow[p] = S(0);
                    const std::int64_t jmax = opt.causal ? i + 1 : T;
                    for (std::int64_t j = 0; j < jmax; ++j) {
                        const S aij = arow[j];
                        const S* vj = tv.row_ptr(j) + c0;
                        for (std::int64_t p = 0; p < dh; ++p) orow[p] += aij * vj[p];
                    }
                    MacCounter::add(static_cast<std::uint64_t>(jmax) * dh);
                }
            }
            if (opt.capture) opt.capture->push_back(a);
            attn->push_back(std::move(a));
        }

        const int heads = H;
        return unary_binary(
            "multihead_attention", std::move(out), {q, k, v},
            [attn, heads, scl](Tape& t, const Tensor<S>& go, const std::vector<Var>& ps) {
                const auto& tq = t.value(ps[0]);
                const auto& tk = t.value(ps[1]);
                const auto& tv = t.value(ps[2]);
                const std::int64_t T = tq.rows(), D = tq.cols();
                const std::int64_t dh = D / heads;
                Tensor<S> gq({T, D}), gk({T, D}), gv({T, D});
                Tensor<S> da({T, T}), ds({T, T});
                for (int h = 0; h < heads; ++h) {
                    const std::int64_t c0 = h * dh;
                    const Tensor<S>& a = (*attn)[static_cast<std::size_t>(h)];
                    // da[i,j] = go_slice[i,:] . v[j, slice]
                    for (std::int64_t i = 0; i < T; ++i) {
                        const S* goi = go.row_ptr(i) + c0;
                        for (std::int64_t j = 0; j < T; ++j) {
                            const S* vj = tv.row_ptr(j) + c0;
                            S acc = S(0);
                            for (std::int64_t p = 0; p < dh; ++p) acc += goi[p] * vj[p];
                            da.at(i, j) = acc;
                        }
                    }
                    MacCounter::add(static_cast<std::uint64_t>(T) * T * dh);
                    // gv[j, slice] += sum_i a[i,j] * go_slice[i,:]
                    for (std::int64_t i = 0; i < T; ++i) {
                        const S* arow = a.row_ptr(i);
                        const S* goi = go.row_ptr(i) + c0;
                        for (std::int64_t j = 0; j < T; ++j) {
                            const S aij = arow[j];
                            if (aij == S(0)) continue;
                            S* gvj = gv.row_ptr(j) + c0;
                            for (std::int64_t p = 0; p < dh; ++p) gvj[p] += aij * goi[p];
                        }
                    }
                    MacCounter::add(static_cast<std::uint64_t>(T) * T * dh);
                    // ds = a o (da - rowsum(da o a)), then scaled
                    for (std::int64_t i = 0; i < T; ++i) {
                        const S* arow = a.row_ptr(i);
                        const S* darow = da.row_ptr(i);
                        S dot = S(0);
                        for (std::int64_t j = 0; j < T; ++j) dot += darow[j] * arow[j];
                        S* dsrow = ds.row_ptr(i);
                        for (std::int64_t j = 0; j < T; ++j)
                            dsrow[j] = arow[j] * (darow[j] - dot) * scl;
                    }
                    // gq[i, slice] += sum_j ds[i,j] * k[j, slice]
                    // gk[j, slice] += sum_i ds[i,j] * q[i, slice]
                    for (std::int64_t i = 0; i < T; ++i) {
                        const S* dsrow = ds.row_ptr(i);
                        S* gqi = gq.row_ptr(i) + c0;
                        const S* qi = tq.row_ptr(i) + c0;
                        for (std::int64_t j = 0; j < T; ++j) {
                            const S d = dsrow[j];
                            if (d == S(0)) continue;
                            const S* kj = tk.row_ptr(j) + c0;
                            S* gkj = gk.row_ptr(j) + c0;
                            for (std::int64_t p = 0; p < dh; ++p) {
                                gqi[p] += d * kj[p];
                                gkj[p] += d * qi[p];
                            }
                        }
                    }
                    MacCounter::add(2 * static_cast<std::uint64_t>(T) * T * dh);
                }
                t.accumulate_move(ps[0], std::move(gq));
                t.accumulate_move(ps[1], std::move(gk));
                t.accumulate_move(ps[2], std::move(gv));
            });
    }

    // ---- backward ------------------------------------------------------

    // Reverse-mode sweep from a scalar loss. Returns gradients for every
    // trainable leaf that participated; frozen leaves are absent.
    GradMap backward(Var loss) {
        if (loss.owner != this || loss.id < 0 || loss.id >= static_cast<int>(nodes_.size()))
            throw UsageError("backward: loss is not a node on this tape");
        if (nodes_[static_cast<std::size_t>(loss.id)].value.numel() != 1)
            throw UsageError("backward: loss must be a scalar");

        grads_.assign(nodes_.size(), Tensor<S>());
        has_grad_.assign(nodes_.size(), 0);
        grads_[static_cast<std::size_t>(loss.id)] = Tensor<S>::scalar(S(1));
        has_grad_[static_cast<std::size_t>(loss.id)] = 1;

        for (int id = loss.id; id >= 0; --id) {
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (!has_grad_[static_cast<std::size_t>(id)] || !n.backward) continue;
            n.backward(*this, grads_[static_cast<std::size_t>(id)], n.parents);
            // free intermediate gradient storage as soon as it is consumed
            if (!n.is_leaf) {
                grads_[static_cast<std::size_t>(id)] = Tensor<S>();
                has_grad_[static_cast<std::size_t>(id)] = 0;
            }
        }

        GradMap out;
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            if (nodes_[id].is_leaf && nodes_[id].trainable && has_grad_[id])
                out.emplace(static_cast<int>(id), std::move(grads_[id]));
        }
        grads_.clear();
        has_grad_.clear();
        return out;
    }

    static const Tensor<S>* find_grad(const GradMap& m, Var v) {
        auto it = m.find(v.id);
        return it == m.end() ? nullptr : &it->second;
    }

  private:
    struct Node {
        Tensor<S> value;
        std::vector<Var> parents;
        std::function<void(Tape&, const Tensor<S>&, const std::vector<Var>&)> backward;
        bool is_leaf = false;
        bool trainable = false;
        const char* op = "";
    };

    static void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
        if (!a.same_shape(b))
            throw ShapeError(std::string(op) + ": shape mismatch, " + a.shape_str() + " vs " +
                             b.shape_str());
    }

    int check(Var v) const {
        if (v.owner != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw UsageError("tape: variable does not belong to this tape");
        return v.id;
    }

    Var push(Node n, bool check_finite = true) {
        if (check_finite && !n.value.all_finite())
            throw NonFiniteError(std::string("non-finite value produced by op '") + n.op + "'");
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1, this};
    }

    template <typename F>
    Var unary_binary(const char* op, Tensor<S> out, std::vector<Var> parents, F&& back) {
        for (Var p : parents) check(p);
        Node n;
        n.value = std::move(out);
        n.parents = std::move(parents);
        n.backward = std::forward<F>(back);
        n.op = op;
        return push(std::move(n));
    }

    // Gradient storage is only allocated for nodes that need it: every
    // non-leaf on the path, plus trainable leaves. Frozen leaves get none.
    bool wants_grad(Var p) const {
        const auto& n = nodes_[static_cast<std::size_t>(p.id)];
        return !n.is_leaf || n.trainable;
    }

    void accumulate(Var p, const Tensor<S>& g) {
        if (!wants_grad(p)) return;
        auto idx = static_cast<std::size_t>(p.id);
        if (!has_grad_[idx]) {
            grads_[idx] = g;
            has_grad_[idx] = 1;
        } else {
            kernels::axpy(S(1), g, grads_[idx]);
        }
    }

    void accumulate_move(Var p, Tensor<S>&& g) {
        if (!wants_grad(p)) return;
        auto idx = static_cast<std::size_t>(p.id);
        if (!has_grad_[idx]) {
            grads_[idx] = std::move(g);
            has_grad_[idx] = 1;
        } else {
            kernels::axpy(S(1), g, grads_[idx]);
        }
    }

    static void softmax_rows_forward(Tensor<S>& x, bool order_independent) {
        std::vector<double> terms;
        for (std::int64_t i = 0; i < x.rows(); ++i) {
            S* row = x.row_ptr(i);
            const std::int64_t c = x.cols();
            S mx = row[0];
            for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            if (order_independent) {
                terms.resize(static_cast<std::size_t>(c));
                for (std::int64_t j = 0; j < c; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    terms[static_cast<std::size_t>(j)] = static_cast<double>(row[j]);
                }
                const S denom =
                    static_cast<S>(order_independent_sum(terms.data(), terms.size()));
                for (std::int64_t j = 0; j < c; ++j) row[j] /= denom;
            } else {
                S denom = S(0);
                for (std::int64_t j = 0; j < c; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    denom += row[j];
                }
                for (std::int64_t j = 0; j < c; ++j) row[j] /= denom;
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<Tensor<S>> grads_;
    std::vector<char> has_grad_;
};

}  // namespace mapd
