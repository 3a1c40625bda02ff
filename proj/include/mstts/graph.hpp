#pragma once

#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "mstts/mat.hpp"

namespace mstts {

template <typename T>
class Graph;

/// Handle to a node on a Graph tape.
template <typename T>
struct Value {
    Graph<T> *graph = nullptr;
    int id = -1;
    const Mat<T> &val() const;
    int rows() const { return val().rows; }
    int cols() const { return val().cols; }
};

/// Reverse-mode tape. Ops append nodes whose parents always have smaller
/// ids, so a reverse sweep over the tape is a valid topological order.
/// Single-threaded; node evaluation order is the construction order, which
/// keeps every forward/backward pass bitwise deterministic.
template <typename T>
class Graph {
  public:
    struct Node {
        Mat<T> value;
        Mat<T> grad;  // allocated on first contribution
        bool requires_grad = false;
        std::function<void(Graph &, Node &)> backward;  // adds into parent grads
    };

    Value<T> leaf(Mat<T> v, bool requires_grad = false) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    const Mat<T> &value(Value<T> v) const { return nodes_[v.id].value; }

    const Mat<T> &grad(Value<T> v) {
        Node &n = nodes_[v.id];
        if (n.grad.empty()) n.grad = Mat<T>(n.value.rows, n.value.cols, T(0));
        return n.grad;
    }

    size_t node_count() const { return nodes_.size(); }

    /// Generic op constructor: `backward` receives the finished node and must
    /// push contributions into parent grads via accum(). Exposed so callers
    /// can register custom ops (the verify harness uses this for its
    /// wrong-gradient fixture).
    Value<T> make_node(Mat<T> value, const std::vector<Value<T>> &parents,
                       std::function<void(Graph &, Node &)> backward) {
        Node n;
        n.value = std::move(value);
        for (const Value<T> &p : parents)
            if (nodes_[p.id].requires_grad) n.requires_grad = true;
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    /// Adds `g` into the grad buffer of node `id`, skipping nodes outside the
    /// gradient path.
    void accum(int id, const Mat<T> &g) {
        Node &n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.empty()) n.grad = Mat<T>(n.value.rows, n.value.cols, T(0));
        for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    }

    Mat<T> *grad_buffer(int id) {
        Node &n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad = Mat<T>(n.value.rows, n.value.cols, T(0));
        return &n.grad;
    }

    /// Reverse sweep from a scalar loss. Seeds d(loss)/d(loss) = 1.
    void backward(Value<T> loss) {
        Node &ln = nodes_[loss.id];
        if (ln.value.rows != 1 || ln.value.cols != 1)
            throw std::invalid_argument("backward: loss must be a 1x1 scalar");
        if (ln.grad.empty()) ln.grad = Mat<T>(1, 1, T(0));
        ln.grad(0, 0) += T(1);
        for (int id = loss.id; id >= 0; --id) {
            Node &n = nodes_[id];
            if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this, n);
        }
    }

    // ----- elementwise -----

    Value<T> add(Value<T> a, Value<T> b) {
        check_same_shape(a, b, "add");
        Mat<T> out = nodes_[a.id].value;
        const Mat<T> &bv = nodes_[b.id].value;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
        int ai = a.id, bi = b.id;
        return make_node(std::move(out), {a, b}, [ai, bi](Graph &g, Node &n) {
            g.accum(ai, n.grad);
            g.accum(bi, n.grad);
        });
    }

    Value<T> sub(Value<T> a, Value<T> b) {
        check_same_shape(a, b, "sub");
        Mat<T> out = nodes_[a.id].value;
        const Mat<T> &bv = nodes_[b.id].value;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
        int ai = a.id, bi = b.id;
        return make_node(std::move(out), {a, b}, [ai, bi](Graph &g, Node &n) {
            g.accum(ai, n.grad);
            if (Mat<T> *gb = g.grad_buffer(bi))
                for (size_t i = 0; i < n.grad.data.size(); ++i) gb->data[i] -= n.grad.data[i];
        });
    }

    Value<T> mul(Value<T> a, Value<T> b) {
        check_same_shape(a, b, "mul");
        Mat<T> out = nodes_[a.id].value;
        const Mat<T> &bv = nodes_[b.id].value;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
        int ai = a.id, bi = b.id;
        return make_node(std::move(out), {a, b}, [ai, bi](Graph &g, Node &n) {
            const Mat<T> &av = g.nodes_[ai].value;
            const Mat<T> &bv2 = g.nodes_[bi].value;
            if (Mat<T> *ga = g.grad_buffer(ai))
                for (size_t i = 0; i < n.grad.data.size(); ++i)
                    ga->data[i] += n.grad.data[i] * bv2.data[i];
            if (Mat<T> *gb = g.grad_buffer(bi))
                for (size_t i = 0; i < n.grad.data.size(); ++i)
                    gb->data[i] += n.grad.data[i] * av.data[i];
        });
    }

    Value<T> scale(Value<T> a, T c) {
        Mat<T> out = nodes_[a.id].value;
        for (T &v : out.data) v *= c;
        int ai = a.id;
        return make_node(std::move(out), {a}, [ai, c](Graph &g, Node &n) {
            if (Mat<T> *ga = g.grad_buffer(ai))
                for (size_t i = 0; i < n.grad.data.size(); ++i) ga->data[i] += c * n.grad.data[i];
        });
    }

    Value<T> relu(Value<T> a) {
        Mat<T> out = nodes_[a.id].value;
        for (T &v : out.data)
            if (v < T(0)) v = T(0);
        int ai = a.id;
        return make_node(std::move(out), {a}, [ai](Graph &g, Node &n) {
            const Mat<T> &av = g.nodes_[ai].value;
            if (Mat<T> *ga = g.grad_buffer(ai))
                for (size_t i = 0; i < n.grad.data.size(); ++i)
                    if (av.data[i] > T(0)) ga->data[i] += n.grad.data[i];
        });
    }

    Value<T> abs(Value<T> a) {
        Mat<T> out = nodes_[a.id].value;
        for (T &v : out.data) v = std::abs(v);
        int ai = a.id;
        return make_node(std::move(out), {a}, [ai](Graph &g, Node &n) {
            const Mat<T> &av = g.nodes_[ai].value;
            if (Mat<T> *ga = g.grad_buffer(ai))
                for (size_t i = 0; i < n.grad.data.size(); ++i) {
                    if (av.data[i] > T(0)) ga->data[i] += n.grad.data[i];
                    else if (av.data[i] < T(0)) ga->data[i] -= n.grad.data[i];
                }
        });
    }

    Value<T> square(Value<T> a) {
        Mat<T> out = nodes_[a.id].value;
        for (T &v : out.data) v *= v;
        int ai = a.id;
        return make_node(std::move(out), {a}, [ai](Graph &g, Node &n) {
            const Mat<T> &av = g.nodes_[ai].value;
            if (Mat<T> *ga = g.grad_buffer(ai))
                for (size_t i = 0; i < n.grad.data.size(); ++i)
                    ga->data[i] += T(2) * av.data[i] * n.grad.data[i];
        });
    }

    /// Broadcast-add of a (1, C) row vector to every row of a.
    Value<T> add_rowvec(Value<T> a, Value<T> v) {
        const Mat<T> &av = nodes_[a.id].value;
        const Mat<T> &vv = nodes_[v.id].value;
        if (vv.rows != 1 || vv.cols != av.cols)
            throw std::invalid_argument("add_rowvec: expected (1, " + std::to_string(av.cols) +
                                        "), got (" + std::to_string(vv.rows) + ", " +
                                        std::to_string(vv.cols) + ")");
        Mat<T> out = av;
        for (int r = 0; r < out.rows; ++r) {
            T *orow = out.row_ptr(r);
            for (int c = 0; c < out.cols; ++c) orow[c] += vv.data[c];
        }
        int ai = a.id, vi = v.id;
        return make_node(std::move(out), {a, v}, [ai, vi](Graph &g, Node &n) {
            g.accum(ai, n.grad);
            if (Mat<T> *gv = g.grad_buffer(vi))
                for (int r = 0; r < n.grad.rows; ++r) {
                    const T *grow = n.grad.row_ptr(r);
                    for (int c = 0; c < n.grad.cols; ++c) gv->data[c] += grow[c];
                }
        });
    }

    // ----- linear algebra -----

    Value<T> matmul(Value<T> a, Value<T> b) {
        const Mat<T> &av = nodes_[a.id].value;
        const Mat<T> &bv = nodes_[b.id].value;
        if (av.cols != bv.rows)
            throw std::invalid_argument("matmul: inner dimensions " + std::to_string(av.cols) +
                                        " vs " + std::to_string(bv.rows));
        Mat<T> out(av.rows, bv.cols, T(0));
        matmul_kernel(av, bv, out, false, false);
        int ai = a.id, bi = b.id;
        return make_node(std::move(out), {a, b}, [ai, bi](Graph &g, Node &n) {
            const Mat<T> &av2 = g.nodes_[ai].value;
            const Mat<T> &bv2 = g.nodes_[bi].value;
            if (Mat<T> *ga = g.grad_buffer(ai)) matmul_kernel(n.grad, bv2, *ga, false, true);
            if (Mat<T> *gb = g.grad_buffer(bi)) matmul_kernel(av2, n.grad, *gb, true, false);
        });
    }

    Value<T> transpose(Value<T> a) {
        const Mat<T> &av = nodes_[a.id].value;
        Mat<T> out(av.cols, av.rows);
        for (int r = 0; r < av.rows; ++r)
            for (int c = 0; c < av.cols; ++c) out(c, r) = av(r, c);
        int ai = a.id;
        return make_node(std::move(out), {a}, [ai](Graph &g, Node &n) {
            if (Mat<T> *ga = g.grad_buffer(ai))
                for (int r = 0; r < n.grad.rows; ++r)
                    for (int c = 0; c < n.grad.cols; ++c) (*ga)(c, r) += n.grad(r, c);
        });
    }

    // ----- reductions / row ops -----

    Value<T> sum(Value<T> a) {
        const Mat<T> &av = nodes_[a.id].value;
        double s = 0.0;
        for (T v : av.data) s += static_cast<double>(v);
        Mat<T> out(1, 1);
        out(0, 0) = static_cast<T>(s);
        int ai = a.id;
        return make_node(std::move(out), {a}, [ai](Graph &g, Node &n) {
            T go = n.grad(0, 0);
            if (Mat<T> *ga = g.grad_buffer(ai))
                for (T &v : ga->data) v += go;
        });
    }

    Value<T> softmax_rows(Value<T> a) {
        const Mat<T> &av = nodes_[a.id].value;
        Mat<T> out(av.rows, av.cols);
        for (int r = 0; r < av.rows; ++r) {
            const T *in = av.row_ptr(r);
            T *o = out.row_ptr(r);
            T mx = in[0];
            for (int c = 1; c < av.cols; ++c) mx = std::max(mx, in[c]);
            double denom = 0.0;
            for (int c = 0; c < av.cols; ++c) {
                o[c] = std::exp(in[c] - mx);
                denom += static_cast<double>(o[c]);
            }
            T inv = static_cast<T>(1.0 / denom);
            for (int c = 0; c < av.cols; ++c) o[c] *= inv;
        }
        int ai = a.id;
        return make_node(std::move(out), {a}, [ai](Graph &g, Node &n) {
            if (Mat<T> *ga = g.grad_buffer(ai)) {
                for (int r = 0; r < n.value.rows; ++r) {
                    const T *y = n.value.row_ptr(r);
                    const T *dy = n.grad.row_ptr(r);
                    T *gx = ga->row_ptr(r);
                    double dot = 0.0;
                    for (int c = 0; c < n.value.cols; ++c)
                        dot += static_cast<double>(dy[c]) * static_cast<double>(y[c]);
                    for (int c = 0; c < n.value.cols; ++c)
                        gx[c] += y[c] * (dy[c] - static_cast<T>(dot));
                }
            }
        });
    }

    /// Row-wise layer normalization with learned gain/bias (each (1, C)).
    Value<T> layer_norm(Value<T> a, Value<T> gain, Value<T> bias, T eps) {
        const Mat<T> &av = nodes_[a.id].value;
        const Mat<T> &gv = nodes_[gain.id].value;
        const Mat<T> &bv = nodes_[bias.id].value;
        if (gv.rows != 1 || gv.cols != av.cols || bv.rows != 1 || bv.cols != av.cols)
            throw std::invalid_argument("layer_norm: gain/bias must be (1, cols)");
        Mat<T> out(av.rows, av.cols);
        Mat<T> xhat(av.rows, av.cols);        // cached for backward
        std::vector<T> inv_std(av.rows);
        for (int r = 0; r < av.rows; ++r) {
            const T *x = av.row_ptr(r);
            double mean = 0.0;
            for (int c = 0; c < av.cols; ++c) mean += static_cast<double>(x[c]);
            mean /= av.cols;
            double var = 0.0;
            for (int c = 0; c < av.cols; ++c) {
                double d = static_cast<double>(x[c]) - mean;
                var += d * d;
            }
            var /= av.cols;
            T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            inv_std[r] = istd;
            T *xh = xhat.row_ptr(r);
            T *o = out.row_ptr(r);
            for (int c = 0; c < av.cols; ++c) {
                xh[c] = (x[c] - static_cast<T>(mean)) * istd;
                o[c] = xh[c] * gv.data[c] + bv.data[c];
            }
        }
        int ai = a.id, gi = gain.id, bi = bias.id;
        return make_node(std::move(out), {a, gain, bias},
                         [ai, gi, bi, xhat = std::move(xhat),
                          inv_std = std::move(inv_std)](Graph &g, Node &n) {
            const Mat<T> &gv2 = g.nodes_[gi].value;
            int rows = n.value.rows, cols = n.value.cols;
            Mat<T> *ga = g.grad_buffer(ai);
            Mat<T> *gg = g.grad_buffer(gi);
            Mat<T> *gb = g.grad_buffer(bi);
            for (int r = 0; r < rows; ++r) {
                const T *dy = n.grad.row_ptr(r);
                const T *xh = xhat.row_ptr(r);
                if (gg)
                    for (int c = 0; c < cols; ++c) gg->data[c] += dy[c] * xh[c];
                if (gb)
                    for (int c = 0; c < cols; ++c) gb->data[c] += dy[c];
                if (ga) {
                    double m1 = 0.0, m2 = 0.0;  // means of g*dy and g*dy*xhat
                    for (int c = 0; c < cols; ++c) {
                        double t = static_cast<double>(gv2.data[c]) * static_cast<double>(dy[c]);
                        m1 += t;
                        m2 += t * static_cast<double>(xh[c]);
                    }
                    m1 /= cols;
                    m2 /= cols;
                    T *gx = ga->row_ptr(r);
                    for (int c = 0; c < cols; ++c) {
                        double t = static_cast<double>(gv2.data[c]) * static_cast<double>(dy[c]);
                        gx[c] += static_cast<T>((t - m1 - static_cast<double>(xh[c]) * m2) *
                                                static_cast<double>(inv_std[r]));
                    }
                }
            }
        });
    }

    // ----- structure ops -----

    Value<T> slice_cols(Value<T> a, int c0, int width) {
        const Mat<T> &av = nodes_[a.id].value;
        if (c0 < 0 || width <= 0 || c0 + width > av.cols)
            throw std::invalid_argument("slice_cols: out of range");
        Mat<T> out(av.rows, width);
        for (int r = 0; r < av.rows; ++r) {
            const T *in = av.row_ptr(r) + c0;
            T *o = out.row_ptr(r);
            for (int c = 0; c < width; ++c) o[c] = in[c];
        }
        int ai = a.id;
        return make_node(std::move(out), {a}, [ai, c0, width](Graph &g, Node &n) {
            if (Mat<T> *ga = g.grad_buffer(ai))
                for (int r = 0; r < n.grad.rows; ++r) {
                    const T *grow = n.grad.row_ptr(r);
                    T *dst = ga->row_ptr(r) + c0;
                    for (int c = 0; c < width; ++c) dst[c] += grow[c];
                }
        });
    }

    Value<T> concat_cols(const std::vector<Value<T>> &parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
        int rows = nodes_[parts[0].id].value.rows;
        int total = 0;
        for (const Value<T> &p : parts) {
            const Mat<T> &pv = nodes_[p.id].value;
            if (pv.rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
            total += pv.cols;
        }
        Mat<T> out(rows, total);
        std::vector<int> ids, offs;
        int off = 0;
        for (const Value<T> &p : parts) {
            const Mat<T> &pv = nodes_[p.id].value;
            for (int r = 0; r < rows; ++r) {
                const T *in = pv.row_ptr(r);
                T *o = out.row_ptr(r) + off;
                for (int c = 0; c < pv.cols; ++c) o[c] = in[c];
            }
            ids.push_back(p.id);
            offs.push_back(off);
            off += pv.cols;
        }
        return make_node(std::move(out), parts,
                         [ids = std::move(ids), offs = std::move(offs)](Graph &g, Node &n) {
            for (size_t k = 0; k < ids.size(); ++k) {
                Mat<T> *gp = g.grad_buffer(ids[k]);
                if (!gp) continue;
                for (int r = 0; r < gp->rows; ++r) {
                    const T *grow = n.grad.row_ptr(r) + offs[k];
                    T *dst = gp->row_ptr(r);
                    for (int c = 0; c < gp->cols; ++c) dst[c] += grow[c];
                }
            }
        });
    }

    /// Embedding lookup: gathers rows of `table` by index.
    Value<T> lookup_rows(Value<T> table, std::vector<int32_t> ids) {
        const Mat<T> &tv = nodes_[table.id].value;
        for (int32_t id : ids)
            if (id < 0 || id >= tv.rows)
                throw std::out_of_range("lookup_rows: index " + std::to_string(id) +
                                        " out of range [0, " + std::to_string(tv.rows) + ")");
        Mat<T> out(static_cast<int>(ids.size()), tv.cols);
        for (size_t r = 0; r < ids.size(); ++r) {
            const T *in = tv.row_ptr(ids[r]);
            T *o = out.row_ptr(static_cast<int>(r));
            for (int c = 0; c < tv.cols; ++c) o[c] = in[c];
        }
        int ti = table.id;
        return make_node(std::move(out), {table}, [ti, ids = std::move(ids)](Graph &g, Node &n) {
            if (Mat<T> *gt = g.grad_buffer(ti))
                for (size_t r = 0; r < ids.size(); ++r) {
                    const T *grow = n.grad.row_ptr(static_cast<int>(r));
                    T *dst = gt->row_ptr(ids[r]);
                    for (int c = 0; c < n.grad.cols; ++c) dst[c] += grow[c];
                }
        });
    }

    /// Length regulation: row i of `a` is repeated counts[i] times, order
    /// preserved. Gradient of each copy accumulates back onto its source row.
    Value<T> repeat_rows(Value<T> a, std::vector<int32_t> counts) {
        const Mat<T> &av = nodes_[a.id].value;
        if (static_cast<int>(counts.size()) != av.rows)
            throw std::invalid_argument("repeat_rows: counts length " +
                                        std::to_string(counts.size()) + " != rows " +
                                        std::to_string(av.rows));
        int64_t total = 0;
        for (int32_t c : counts) {
            if (c < 0) throw std::invalid_argument("repeat_rows: negative count");
            total += c;
        }
        Mat<T> out(static_cast<int>(total), av.cols);
        int r = 0;
        for (int i = 0; i < av.rows; ++i) {
            const T *in = av.row_ptr(i);
            for (int32_t k = 0; k < counts[i]; ++k) {
                T *o = out.row_ptr(r++);
                for (int c = 0; c < av.cols; ++c) o[c] = in[c];
            }
        }
        int ai = a.id;
        return make_node(std::move(out), {a}, [ai, counts = std::move(counts)](Graph &g, Node &n) {
            if (Mat<T> *ga = g.grad_buffer(ai)) {
                int row = 0;
                for (int i = 0; i < ga->rows; ++i) {
                    T *dst = ga->row_ptr(i);
                    for (int32_t k = 0; k < counts[i]; ++k) {
                        const T *grow = n.grad.row_ptr(row++);
                        for (int c = 0; c < ga->cols; ++c) dst[c] += grow[c];
                    }
                }
            }
        });
    }

    /// 1-D convolution over the row (time) axis with zero same-padding.
    /// x: (L, Cin); w: (kernel*Cin, Cout) laid out [tap][cin]; b: (1, Cout).
    Value<T> conv1d(Value<T> x, Value<T> w, Value<T> b, int kernel) {
        const Mat<T> &xv = nodes_[x.id].value;
        const Mat<T> &wv = nodes_[w.id].value;
        const Mat<T> &bv = nodes_[b.id].value;
        int cin = xv.cols;
        if (kernel < 1 || wv.rows != kernel * cin)
            throw std::invalid_argument("conv1d: weight rows != kernel*cin");
        int cout = wv.cols;
        if (bv.rows != 1 || bv.cols != cout)
            throw std::invalid_argument("conv1d: bias must be (1, cout)");
        int L = xv.rows;
        int pad = kernel / 2;
        Mat<T> out(L, cout);
        for (int t = 0; t < L; ++t) {
            T *o = out.row_ptr(t);
            for (int c = 0; c < cout; ++c) o[c] = bv.data[c];
            for (int dk = 0; dk < kernel; ++dk) {
                int s = t + dk - pad;
                if (s < 0 || s >= L) continue;
                const T *xs = xv.row_ptr(s);
                const T *wrow = wv.row_ptr(dk * cin);
                for (int ci = 0; ci < cin; ++ci) {
                    T xval = xs[ci];
                    const T *wr = wrow + static_cast<size_t>(ci) * cout;
                    for (int c = 0; c < cout; ++c) o[c] += xval * wr[c];
                }
            }
        }
        int xi = x.id, wi = w.id, bi = b.id;
        return make_node(std::move(out), {x, w, b}, [xi, wi, bi, kernel](Graph &g, Node &n) {
            const Mat<T> &xv2 = g.nodes_[xi].value;
            const Mat<T> &wv2 = g.nodes_[wi].value;
            int L = xv2.rows, cin = xv2.cols, cout = wv2.cols, pad = kernel / 2;
            Mat<T> *gx = g.grad_buffer(xi);
            Mat<T> *gw = g.grad_buffer(wi);
            Mat<T> *gb = g.grad_buffer(bi);
            if (gb)
                for (int t = 0; t < L; ++t) {
                    const T *dy = n.grad.row_ptr(t);
                    for (int c = 0; c < cout; ++c) gb->data[c] += dy[c];
                }
            for (int t = 0; t < L; ++t) {
                const T *dy = n.grad.row_ptr(t);
                for (int dk = 0; dk < kernel; ++dk) {
                    int s = t + dk - pad;
                    if (s < 0 || s >= L) continue;
                    const T *xs = xv2.row_ptr(s);
                    const T *wrow = wv2.row_ptr(dk * cin);
                    for (int ci = 0; ci < cin; ++ci) {
                        const T *wr = wrow + static_cast<size_t>(ci) * cout;
                        if (gw) {
                            T *gwr = gw->row_ptr(dk * cin) + static_cast<size_t>(ci) * cout;
                            T xval = xs[ci];
                            for (int c = 0; c < cout; ++c) gwr[c] += xval * dy[c];
                        }
                        if (gx) {
                            double acc = 0.0;
                            for (int c = 0; c < cout; ++c)
                                acc += static_cast<double>(wr[c]) * static_cast<double>(dy[c]);
                            (*gx)(s, ci) += static_cast<T>(acc);
                        }
                    }
                }
            }
        });
    }

    /// Inverted dropout; the mask is sampled at construction so backward
    /// reuses it. Callers skip this op entirely in eval mode.
    Value<T> dropout(Value<T> a, double p, std::mt19937_64 &rng) {
        if (p <= 0.0) return a;
        if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
        const Mat<T> &av = nodes_[a.id].value;
        std::vector<uint8_t> keep(av.data.size());
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        for (size_t i = 0; i < keep.size(); ++i) keep[i] = uni(rng) >= p ? 1 : 0;
        T inv = static_cast<T>(1.0 / (1.0 - p));
        Mat<T> out = av;
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = keep[i] ? out.data[i] * inv : T(0);
        int ai = a.id;
        return make_node(std::move(out), {a},
                         [ai, inv, keep = std::move(keep)](Graph &g, Node &n) {
            if (Mat<T> *ga = g.grad_buffer(ai))
                for (size_t i = 0; i < n.grad.data.size(); ++i)
                    if (keep[i]) ga->data[i] += n.grad.data[i] * inv;
        });
    }

  private:
    friend struct Value<T>;
    std::vector<Node> nodes_;

    static void check_shapes(bool ok, const char *what) {
        if (!ok) throw std::invalid_argument(std::string(what) + ": shape mismatch");
    }
    void check_same_shape(Value<T> a, Value<T> b, const char *what) const {
        check_shapes(nodes_[a.id].value.same_shape(nodes_[b.id].value), what);
    }

    /// C += op(A) * op(B); transposition handled by index juggling so no
    /// temporaries are materialized.
    static void matmul_kernel(const Mat<T> &a, const Mat<T> &b, Mat<T> &c, bool ta, bool tb) {
        int n = ta ? a.cols : a.rows;
        int p = ta ? a.rows : a.cols;
        int m = tb ? b.rows : b.cols;
        if (c.rows != n || c.cols != m) throw std::invalid_argument("matmul_kernel: bad output");
        if (!ta && !tb) {
            for (int i = 0; i < n; ++i) {
                const T *arow = a.row_ptr(i);
                T *crow = c.row_ptr(i);
                for (int k = 0; k < p; ++k) {
                    T av = arow[k];
                    const T *brow = b.row_ptr(k);
                    for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
                }
            }
        } else if (!ta && tb) {
            // C[i,j] += sum_k A[i,k] * B[j,k]
            for (int i = 0; i < n; ++i) {
                const T *arow = a.row_ptr(i);
                T *crow = c.row_ptr(i);
                for (int j = 0; j < m; ++j) {
                    const T *brow = b.row_ptr(j);
                    double acc = 0.0;
                    for (int k = 0; k < p; ++k)
                        acc += static_cast<double>(arow[k]) * static_cast<double>(brow[k]);
                    crow[j] += static_cast<T>(acc);
                }
            }
        } else if (ta && !tb) {
            // C[i,j] += sum_k A[k,i] * B[k,j]
            for (int k = 0; k < p; ++k) {
                const T *arow = a.row_ptr(k);
                const T *brow = b.row_ptr(k);
                for (int i = 0; i < n; ++i) {
                    T av = arow[i];
                    T *crow = c.row_ptr(i);
                    for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
                }
            }
        } else {
            throw std::invalid_argument("matmul_kernel: double transpose unsupported");
        }
    }
};

template <typename T>
inline const Mat<T> &Value<T>::val() const {
    return graph->value(*this);
}

}  // namespace mstts
