#include "modisc/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace modisc::ad {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

MapM as_mat(Tensor& t, int rows, int cols) { return MapM(t.data(), rows, cols); }
CMapM as_mat(const Tensor& t, int rows, int cols) { return CMapM(t.data(), rows, cols); }

void ensure_grad(Node& n) {
    if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.value.shape());
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a->value.shape()) + " vs " +
                                    shape_str(b->value.shape()));
}

}  // namespace

Var constant(Tensor v, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = false;
    n->name = std::move(name);
    n->id = g_next_id++;
    return n;
}

Var leaf(Tensor v, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->name = std::move(name);
    n->id = g_next_id++;
    return n;
}

Var make_node(Tensor value, std::vector<Var> parents,
              std::function<void(Node&)> backprop, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    n->parents = std::move(parents);
    if (rg) n->backprop = std::move(backprop);
    n->name = std::move(name);
    n->id = g_next_id++;
    return n;
}

void backward(const Var& loss) {
    if (loss->value.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar");
    // Collect reachable subgraph, sort by creation id descending.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->id > b->id; });
    ensure_grad(*loss);
    loss->grad[0] += 1.0;
    for (Node* n : order) {
        if (!n->backprop) continue;
        if (n->grad.numel() == 0) continue;  // unreached along differentiable paths
        n->backprop(*n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && p->grad.numel() > 0 && !p->grad.all_finite())
                throw std::runtime_error("backward: non-finite gradient at node '" +
                                         (p->name.empty() ? std::string("<unnamed>") : p->name) + "'");
        }
    }
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            ensure_grad(*a);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            ensure_grad(*a);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            ensure_grad(*a);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                a->grad[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                b->grad[i] += n.grad[i] * a->value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (auto& v : out.vec()) v *= s;
    return make_node(std::move(out), {a}, [a, s](Node& n) {
        ensure_grad(*a);
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += s * n.grad[i];
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (auto& v : out.vec()) v += s;
    return make_node(std::move(out), {a}, [a](Node& n) {
        ensure_grad(*a);
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    });
}

Var add_rowvec(const Var& a, const Var& bias) {
    if (a->value.ndim() != 2 || bias->value.ndim() != 1 ||
        a->value.dim(1) != bias->value.dim(0))
        throw std::invalid_argument("add_rowvec: bad shapes");
    const int rows = a->value.dim(0), cols = a->value.dim(1);
    Tensor out = a->value;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out.at(r, c) += bias->value[c];
    return make_node(std::move(out), {a, bias}, [a, bias, rows, cols](Node& n) {
        if (a->requires_grad) {
            ensure_grad(*a);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (bias->requires_grad) {
            ensure_grad(*bias);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) bias->grad[c] += n.grad.at(r, c);
        }
    });
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2)
        throw std::invalid_argument("matmul: 2D tensors required");
    const int am = a->value.dim(0), an = a->value.dim(1);
    const int bm = b->value.dim(0), bn = b->value.dim(1);
    const int m = trans_a ? an : am;
    const int k = trans_a ? am : an;
    const int k2 = trans_b ? bn : bm;
    const int n = trans_b ? bm : bn;
    if (k != k2) throw std::invalid_argument("matmul: inner dim mismatch");
    Tensor out({m, n});
    {
        CMapM A(a->value.data(), am, an);
        CMapM B(b->value.data(), bm, bn);
        MapM C(out.data(), m, n);
        if (!trans_a && !trans_b) C.noalias() = A * B;
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
        else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
    return make_node(std::move(out), {a, b},
                     [a, b, trans_a, trans_b, am, an, bm, bn, m, n](Node& nd) {
        CMapM G(nd.grad.data(), m, n);
        CMapM A(a->value.data(), am, an);
        CMapM B(b->value.data(), bm, bn);
        if (a->requires_grad) {
            ensure_grad(*a);
            MapM dA(a->grad.data(), am, an);
            if (!trans_a && !trans_b) dA.noalias() += G * B.transpose();
            else if (!trans_a && trans_b) dA.noalias() += G * B;
            else if (trans_a && !trans_b) dA.noalias() += B * G.transpose();
            else dA.noalias() += B.transpose() * G.transpose();
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            MapM dB(b->grad.data(), bm, bn);
            if (!trans_a && !trans_b) dB.noalias() += A.transpose() * G;
            else if (trans_a && !trans_b) dB.noalias() += A * G;
            else if (!trans_a && trans_b) dB.noalias() += G.transpose() * A;
            else dB.noalias() += G.transpose() * A.transpose();
        }
    });
}

Var relu(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
    return make_node(std::move(out), {a}, [a](Node& n) {
        ensure_grad(*a);
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
            if (a->value[i] > 0.0) a->grad[i] += n.grad[i];
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.vec()) v = 1.0 / (1.0 + std::exp(-v));
    return make_node(std::move(out), {a}, [a](Node& n) {
        ensure_grad(*a);
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
            const double y = n.value[i];
            a->grad[i] += n.grad[i] * y * (1.0 - y);
        }
    });
}

Var tanh_v(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.vec()) v = std::tanh(v);
    return make_node(std::move(out), {a}, [a](Node& n) {
        ensure_grad(*a);
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
            const double y = n.value[i];
            a->grad[i] += n.grad[i] * (1.0 - y * y);
        }
    });
}

Var softmax_rows(const Var& a) {
    if (a->value.ndim() != 2) throw std::invalid_argument("softmax_rows: 2D required");
    const int rows = a->value.dim(0), cols = a->value.dim(1);
    Tensor out = a->value;
    for (int r = 0; r < rows; ++r) {
        double mx = out.at(r, 0);
        for (int c = 1; c < cols; ++c) mx = std::max(mx, out.at(r, c));
        double sum = 0.0;
        for (int c = 0; c < cols; ++c) {
            const double e = std::exp(out.at(r, c) - mx);
            out.at(r, c) = e;
            sum += e;
        }
        for (int c = 0; c < cols; ++c) out.at(r, c) /= sum;
    }
    return make_node(std::move(out), {a}, [a, rows, cols](Node& n) {
        ensure_grad(*a);
        for (int r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += n.grad.at(r, c) * n.value.at(r, c);
            for (int c = 0; c < cols; ++c)
                a->grad.at(r, c) += n.value.at(r, c) * (n.grad.at(r, c) - dot);
        }
    });
}

Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps) {
    if (a->value.ndim() != 2) throw std::invalid_argument("layer_norm_rows: 2D required");
    const int rows = a->value.dim(0), cols = a->value.dim(1);
    if (gain->value.numel() != cols || bias->value.numel() != cols)
        throw std::invalid_argument("layer_norm_rows: gain/bias width mismatch");
    Tensor out({rows, cols});
    Tensor xhat({rows, cols});
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (int c = 0; c < cols; ++c) mean += a->value.at(r, c);
        mean /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) {
            const double d = a->value.at(r, c) - mean;
            var += d * d;
        }
        var /= cols;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (int c = 0; c < cols; ++c) {
            const double xh = (a->value.at(r, c) - mean) * is;
            xhat.at(r, c) = xh;
            out.at(r, c) = xh * gain->value[c] + bias->value[c];
        }
    }
    auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
    auto istd_p = std::make_shared<std::vector<double>>(std::move(inv_std));
    return make_node(std::move(out), {a, gain, bias},
                     [a, gain, bias, rows, cols, xhat_p, istd_p](Node& n) {
        if (gain->requires_grad) ensure_grad(*gain);
        if (bias->requires_grad) ensure_grad(*bias);
        if (a->requires_grad) ensure_grad(*a);
        for (int r = 0; r < rows; ++r) {
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (int c = 0; c < cols; ++c) {
                const double g = n.grad.at(r, c);
                const double xh = xhat_p->at(r, c);
                if (gain->requires_grad) gain->grad[c] += g * xh;
                if (bias->requires_grad) bias->grad[c] += g;
                const double dxh = g * gain->value[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            if (a->requires_grad) {
                const double is = (*istd_p)[static_cast<std::size_t>(r)];
                for (int c = 0; c < cols; ++c) {
                    const double dxh = n.grad.at(r, c) * gain->value[c];
                    a->grad.at(r, c) +=
                        is * (dxh - sum_dxh / cols - xhat_p->at(r, c) * sum_dxh_xh / cols);
                }
            }
        }
    });
}

Var normalize_columns(const Var& a, double eps) {
    if (a->value.ndim() != 2) throw std::invalid_argument("normalize_columns: 2D required");
    const int rows = a->value.dim(0), cols = a->value.dim(1);
    std::vector<double> colsum(static_cast<std::size_t>(cols), eps);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) colsum[static_cast<std::size_t>(c)] += a->value.at(r, c);
    Tensor out({rows, cols});
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out.at(r, c) = a->value.at(r, c) / colsum[static_cast<std::size_t>(c)];
    auto cs = std::make_shared<std::vector<double>>(std::move(colsum));
    return make_node(std::move(out), {a}, [a, rows, cols, cs](Node& n) {
        ensure_grad(*a);
        for (int c = 0; c < cols; ++c) {
            const double s = (*cs)[static_cast<std::size_t>(c)];
            double dot = 0.0;
            for (int r = 0; r < rows; ++r) dot += n.grad.at(r, c) * n.value.at(r, c);
            for (int r = 0; r < rows; ++r)
                a->grad.at(r, c) += (n.grad.at(r, c) - dot) / s;
        }
    });
}

namespace {

struct ConvDims {
    int C, H, W, O, kh, kw, oh, ow;
};

// im2col: [C*kh*kw, oh*ow]
Tensor im2col(const Tensor& x, const ConvDims& d, int stride, int pad) {
    Tensor col({d.C * d.kh * d.kw, d.oh * d.ow});
    for (int c = 0; c < d.C; ++c)
        for (int ki = 0; ki < d.kh; ++ki)
            for (int kj = 0; kj < d.kw; ++kj) {
                const int row = (c * d.kh + ki) * d.kw + kj;
                for (int oi = 0; oi < d.oh; ++oi) {
                    const int ii = oi * stride + ki - pad;
                    for (int oj = 0; oj < d.ow; ++oj) {
                        const int jj = oj * stride + kj - pad;
                        double v = 0.0;
                        if (ii >= 0 && ii < d.H && jj >= 0 && jj < d.W) v = x.at(c, ii, jj);
                        col.at(row, oi * d.ow + oj) = v;
                    }
                }
            }
    return col;
}

void col2im_accum(const Tensor& col, Tensor& dx, const ConvDims& d, int stride, int pad) {
    for (int c = 0; c < d.C; ++c)
        for (int ki = 0; ki < d.kh; ++ki)
            for (int kj = 0; kj < d.kw; ++kj) {
                const int row = (c * d.kh + ki) * d.kw + kj;
                for (int oi = 0; oi < d.oh; ++oi) {
                    const int ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= d.H) continue;
                    for (int oj = 0; oj < d.ow; ++oj) {
                        const int jj = oj * stride + kj - pad;
                        if (jj < 0 || jj >= d.W) continue;
                        dx.at(c, ii, jj) += col.at(row, oi * d.ow + oj);
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    if (x->value.ndim() != 3 || w->value.ndim() != 4)
        throw std::invalid_argument("conv2d: expected x[C,H,W], w[O,C,kh,kw]");
    ConvDims d;
    d.C = x->value.dim(0);
    d.H = x->value.dim(1);
    d.W = x->value.dim(2);
    d.O = w->value.dim(0);
    d.kh = w->value.dim(2);
    d.kw = w->value.dim(3);
    if (w->value.dim(1) != d.C) throw std::invalid_argument("conv2d: channel mismatch");
    if (b->value.numel() != d.O) throw std::invalid_argument("conv2d: bias size mismatch");
    d.oh = (d.H + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.W + 2 * pad - d.kw) / stride + 1;
    auto col = std::make_shared<Tensor>(im2col(x->value, d, stride, pad));
    Tensor out({d.O, d.oh, d.ow});
    {
        CMapM Wm(w->value.data(), d.O, d.C * d.kh * d.kw);
        CMapM Cm(col->data(), d.C * d.kh * d.kw, d.oh * d.ow);
        MapM Om(out.data(), d.O, d.oh * d.ow);
        Om.noalias() = Wm * Cm;
        for (int o = 0; o < d.O; ++o) Om.row(o).array() += b->value[o];
    }
    return make_node(std::move(out), {x, w, b}, [x, w, b, d, stride, pad, col](Node& n) {
        CMapM G(n.grad.data(), d.O, d.oh * d.ow);
        if (b->requires_grad) {
            ensure_grad(*b);
            for (int o = 0; o < d.O; ++o) b->grad[o] += G.row(o).sum();
        }
        if (w->requires_grad) {
            ensure_grad(*w);
            MapM dW(w->grad.data(), d.O, d.C * d.kh * d.kw);
            CMapM Cm(col->data(), d.C * d.kh * d.kw, d.oh * d.ow);
            dW.noalias() += G * Cm.transpose();
        }
        if (x->requires_grad) {
            ensure_grad(*x);
            Tensor dcol({d.C * d.kh * d.kw, d.oh * d.ow});
            MapM dC(dcol.data(), d.C * d.kh * d.kw, d.oh * d.ow);
            CMapM Wm(w->value.data(), d.O, d.C * d.kh * d.kw);
            dC.noalias() = Wm.transpose() * G;
            col2im_accum(dcol, x->grad, d, stride, pad);
        }
    });
}

Var upsample_nearest2(const Var& x) {
    if (x->value.ndim() != 3) throw std::invalid_argument("upsample_nearest2: 3D required");
    const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    Tensor out({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < 2 * H; ++i)
            for (int j = 0; j < 2 * W; ++j) out.at(c, i, j) = x->value.at(c, i / 2, j / 2);
    return make_node(std::move(out), {x}, [x, C, H, W](Node& n) {
        ensure_grad(*x);
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < 2 * H; ++i)
                for (int j = 0; j < 2 * W; ++j) x->grad.at(c, i / 2, j / 2) += n.grad.at(c, i, j);
    });
}

Var chw_to_nc(const Var& x) {
    if (x->value.ndim() != 3) throw std::invalid_argument("chw_to_nc: 3D required");
    const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    Tensor out({H * W, C});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) out.at(i * W + j, c) = x->value.at(c, i, j);
    return make_node(std::move(out), {x}, [x, C, H, W](Node& n) {
        ensure_grad(*x);
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) x->grad.at(c, i, j) += n.grad.at(i * W + j, c);
    });
}

Var nc_to_chw(const Var& x, int h, int w) {
    if (x->value.ndim() != 2 || x->value.dim(0) != h * w)
        throw std::invalid_argument("nc_to_chw: bad shapes");
    const int C = x->value.dim(1);
    Tensor out({C, h, w});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) out.at(c, i, j) = x->value.at(i * w + j, c);
    return make_node(std::move(out), {x}, [x, C, h, w](Node& n) {
        ensure_grad(*x);
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) x->grad.at(i * w + j, c) += n.grad.at(c, i, j);
    });
}

Var select_column(const Var& a, int j) {
    if (a->value.ndim() != 2 || j < 0 || j >= a->value.dim(1))
        throw std::invalid_argument("select_column: bad column");
    const int rows = a->value.dim(0);
    Tensor out({rows});
    for (int r = 0; r < rows; ++r) out[r] = a->value.at(r, j);
    return make_node(std::move(out), {a}, [a, j, rows](Node& n) {
        ensure_grad(*a);
        for (int r = 0; r < rows; ++r) a->grad.at(r, j) += n.grad[r];
    });
}

Var mse_against(const Var& pred, const Tensor& target) {
    if (!pred->value.same_shape(target))
        throw std::invalid_argument("mse_against: shape mismatch");
    const std::int64_t n = pred->value.numel();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = pred->value[i] - target[i];
        acc += d * d;
    }
    Tensor out({1});
    out[0] = acc / static_cast<double>(n);
    auto tgt = std::make_shared<Tensor>(target);
    return make_node(std::move(out), {pred}, [pred, tgt, n](Node& nd) {
        ensure_grad(*pred);
        const double g = nd.grad[0] * 2.0 / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i)
            pred->grad[i] += g * (pred->value[i] - (*tgt)[i]);
    });
}

Var sum_all(const Var& a) {
    Tensor out({1});
    double acc = 0.0;
    for (std::int64_t i = 0; i < a->value.numel(); ++i) acc += a->value[i];
    out[0] = acc;
    return make_node(std::move(out), {a}, [a](Node& n) {
        ensure_grad(*a);
        for (std::int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += n.grad[0];
    });
}

}  // namespace modisc::ad
