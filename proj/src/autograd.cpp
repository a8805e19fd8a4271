#include "refgen/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace refgen::ag {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

void check_same_shape(const std::string& op, const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val))
        fail(op, "shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
}

void check_rank(const std::string& op, const Var& a, size_t rank) {
    if (a->val.rank() != rank)
        fail(op, "expected rank " + std::to_string(rank) + ", got " + a->val.shape_str());
}

Var make(Tensor val, std::vector<Var> parents, std::string op,
         std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->op = std::move(op);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    if (n->requires_grad)
        n->backward_fn = std::move(backward_fn);
    return n;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Raw 2-D matrix kernels; shapes validated by callers.
Tensor mm(const Tensor& a, const Tensor& b) {  // [m,k] @ [k,n]
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (int64_t i = 0; i < m; i++)
        for (int64_t l = 0; l < k; l++) {
            double av = a[i * k + l];
            if (av == 0.0) continue;
            const double* brow = b.data() + l * n;
            double* crow = c.data() + i * n;
            for (int64_t j = 0; j < n; j++)
                crow[j] += av * brow[j];
        }
    return c;
}

Tensor mm_nt(const Tensor& a, const Tensor& b) {  // [m,k] @ [n,k]^T
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor c({m, n});
    for (int64_t i = 0; i < m; i++)
        for (int64_t j = 0; j < n; j++) {
            const double* arow = a.data() + i * k;
            const double* brow = b.data() + j * k;
            double s = 0.0;
            for (int64_t l = 0; l < k; l++)
                s += arow[l] * brow[l];
            c[i * n + j] = s;
        }
    return c;
}

Tensor mm_tn(const Tensor& a, const Tensor& b) {  // [k,m]^T @ [k,n]
    int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (int64_t l = 0; l < k; l++) {
        const double* arow = a.data() + l * m;
        const double* brow = b.data() + l * n;
        for (int64_t i = 0; i < m; i++) {
            double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c.data() + i * n;
            for (int64_t j = 0; j < n; j++)
                crow[j] += av * brow[j];
        }
    }
    return c;
}

}  // namespace

void Node::accum(const Var& p, const Tensor& delta) {
    if (!p->requires_grad)
        return;
    if (p->grad.empty())
        p->grad = Tensor::zeros(p->val.shape());
    for (int64_t i = 0; i < delta.numel(); i++)
        p->grad[i] += delta[i];
}

Var leaf(Tensor v, bool requires_grad, std::string name) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = requires_grad;
    n->op = std::move(name);
    return n;
}

Var constant(Tensor v) { return leaf(std::move(v), false, "const"); }
Var param(Tensor v) { return leaf(std::move(v), true, "param"); }

Var add(const Var& a, const Var& b) {
    check_same_shape("add", a, b);
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); i++)
        out[i] += b->val[i];
    return make(std::move(out), {a, b}, "add", [](Node& n) {
        Node::accum(n.parents[0], n.grad);
        Node::accum(n.parents[1], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape("sub", a, b);
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); i++)
        out[i] -= b->val[i];
    return make(std::move(out), {a, b}, "sub", [](Node& n) {
        Node::accum(n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor neg = n.grad;
            for (int64_t i = 0; i < neg.numel(); i++)
                neg[i] = -neg[i];
            Node::accum(n.parents[1], neg);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape("mul", a, b);
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); i++)
        out[i] *= b->val[i];
    return make(std::move(out), {a, b}, "mul", [](Node& n) {
        const Var& a = n.parents[0];
        const Var& b = n.parents[1];
        if (a->requires_grad) {
            Tensor da = n.grad;
            for (int64_t i = 0; i < da.numel(); i++)
                da[i] *= b->val[i];
            Node::accum(a, da);
        }
        if (b->requires_grad) {
            Tensor db = n.grad;
            for (int64_t i = 0; i < db.numel(); i++)
                db[i] *= a->val[i];
            Node::accum(b, db);
        }
    });
}

Var scale(const Var& a, double c) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); i++)
        out[i] *= c;
    return make(std::move(out), {a}, "scale", [c](Node& n) {
        Tensor da = n.grad;
        for (int64_t i = 0; i < da.numel(); i++)
            da[i] *= c;
        Node::accum(n.parents[0], da);
    });
}

Var silu(const Var& a) {
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); i++)
        out[i] *= sigmoid(out[i]);
    return make(std::move(out), {a}, "silu", [](Node& n) {
        const Tensor& x = n.parents[0]->val;
        Tensor da = n.grad;
        for (int64_t i = 0; i < da.numel(); i++) {
            double s = sigmoid(x[i]);
            da[i] *= s * (1.0 + x[i] * (1.0 - s));
        }
        Node::accum(n.parents[0], da);
    });
}

Var mean_all(const Var& a) {
    if (a->val.numel() == 0)
        fail("mean_all", "empty tensor");
    double s = 0.0;
    for (int64_t i = 0; i < a->val.numel(); i++)
        s += a->val[i];
    double inv_n = 1.0 / (double)a->val.numel();
    Tensor out = Tensor::scalar(s * inv_n);
    return make(std::move(out), {a}, "mean_all", [inv_n](Node& n) {
        double g = n.grad[0] * inv_n;
        Tensor da = Tensor::full(n.parents[0]->val.shape(), g);
        Node::accum(n.parents[0], da);
    });
}

Var matmul(const Var& a, const Var& b) {
    check_rank("matmul", a, 2);
    check_rank("matmul", b, 2);
    if (a->val.dim(1) != b->val.dim(0))
        fail("matmul", "inner dims " + a->val.shape_str() + " vs " + b->val.shape_str());
    return make(mm(a->val, b->val), {a, b}, "matmul", [](Node& n) {
        const Var& a = n.parents[0];
        const Var& b = n.parents[1];
        if (a->requires_grad)
            Node::accum(a, mm_nt(n.grad, b->val));   // g @ B^T
        if (b->requires_grad)
            Node::accum(b, mm_tn(a->val, n.grad));   // A^T @ g
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    check_rank("matmul_nt", a, 2);
    check_rank("matmul_nt", b, 2);
    if (a->val.dim(1) != b->val.dim(1))
        fail("matmul_nt", "inner dims " + a->val.shape_str() + " vs " + b->val.shape_str());
    return make(mm_nt(a->val, b->val), {a, b}, "matmul_nt", [](Node& n) {
        const Var& a = n.parents[0];
        const Var& b = n.parents[1];
        if (a->requires_grad)
            Node::accum(a, mm(n.grad, b->val));      // g @ B
        if (b->requires_grad)
            Node::accum(b, mm_tn(n.grad, a->val));   // g^T @ A
    });
}

Var softmax_rows(const Var& a) {
    check_rank("softmax_rows", a, 2);
    int64_t rows = a->val.dim(0), cols = a->val.dim(1);
    Tensor out = a->val;
    for (int64_t r = 0; r < rows; r++) {
        double* p = out.data() + r * cols;
        double mx = p[0];
        for (int64_t j = 1; j < cols; j++)
            mx = std::max(mx, p[j]);
        double s = 0.0;
        for (int64_t j = 0; j < cols; j++) {
            p[j] = std::exp(p[j] - mx);
            s += p[j];
        }
        for (int64_t j = 0; j < cols; j++)
            p[j] /= s;
    }
    return make(std::move(out), {a}, "softmax_rows", [rows, cols](Node& n) {
        Tensor da({rows, cols});
        for (int64_t r = 0; r < rows; r++) {
            const double* p = n.val.data() + r * cols;
            const double* g = n.grad.data() + r * cols;
            double dot = 0.0;
            for (int64_t j = 0; j < cols; j++)
                dot += p[j] * g[j];
            double* d = da.data() + r * cols;
            for (int64_t j = 0; j < cols; j++)
                d[j] = p[j] * (g[j] - dot);
        }
        Node::accum(n.parents[0], da);
    });
}

Var transpose2(const Var& a) {
    check_rank("transpose2", a, 2);
    int64_t rows = a->val.dim(0), cols = a->val.dim(1);
    Tensor out({cols, rows});
    for (int64_t r = 0; r < rows; r++)
        for (int64_t c = 0; c < cols; c++)
            out[c * rows + r] = a->val[r * cols + c];
    return make(std::move(out), {a}, "transpose2", [rows, cols](Node& n) {
        Tensor da({rows, cols});
        for (int64_t c = 0; c < cols; c++)
            for (int64_t r = 0; r < rows; r++)
                da[r * cols + c] = n.grad[c * rows + r];
        Node::accum(n.parents[0], da);
    });
}

Var add_row_bias(const Var& x, const Var& b) {
    check_rank("add_row_bias", x, 2);
    check_rank("add_row_bias", b, 1);
    int64_t rows = x->val.dim(0), cols = x->val.dim(1);
    if (b->val.dim(0) != cols)
        fail("add_row_bias", "bias " + b->val.shape_str() + " vs cols " + std::to_string(cols));
    Tensor out = x->val;
    for (int64_t r = 0; r < rows; r++)
        for (int64_t c = 0; c < cols; c++)
            out[r * cols + c] += b->val[c];
    return make(std::move(out), {x, b}, "add_row_bias", [rows, cols](Node& n) {
        Node::accum(n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor db({cols});
            for (int64_t r = 0; r < rows; r++)
                for (int64_t c = 0; c < cols; c++)
                    db[c] += n.grad[r * cols + c];
            Node::accum(n.parents[1], db);
        }
    });
}

Var reshape(const Var& a, std::vector<int64_t> shape) {
    Tensor out = a->val.reshaped(shape);
    return make(std::move(out), {a}, "reshape", [](Node& n) {
        Node::accum(n.parents[0], n.grad.reshaped(n.parents[0]->val.shape()));
    });
}

namespace {

// slice/concat share one addressing scheme: view the tensor as
// [outer, axis, inner] and copy contiguous inner runs.
struct AxisView {
    int64_t outer, axis, inner;
};

AxisView axis_view(const Tensor& t, int axis, const std::string& op) {
    size_t rank = t.rank();
    bool ok = (rank == 2 && (axis == 0 || axis == 1)) || (rank == 3 && axis == 0);
    if (!ok)
        fail(op, "unsupported axis " + std::to_string(axis) + " for " + t.shape_str());
    AxisView v{1, t.dim(axis), 1};
    for (int i = 0; i < axis; i++)
        v.outer *= t.dim(i);
    for (size_t i = (size_t)axis + 1; i < rank; i++)
        v.inner *= t.dim(i);
    return v;
}

}  // namespace

Var slice(const Var& a, int axis, int64_t start, int64_t len) {
    AxisView v = axis_view(a->val, axis, "slice");
    if (start < 0 || len < 0 || start + len > v.axis)
        fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                          ") out of " + std::to_string(v.axis));
    std::vector<int64_t> out_shape = a->val.shape();
    out_shape[(size_t)axis] = len;
    Tensor out(out_shape);
    for (int64_t o = 0; o < v.outer; o++)
        for (int64_t i = 0; i < len; i++)
            std::copy_n(a->val.data() + (o * v.axis + start + i) * v.inner, v.inner,
                        out.data() + (o * len + i) * v.inner);
    return make(std::move(out), {a}, "slice", [v, axis, start, len](Node& n) {
        const Var& a = n.parents[0];
        if (a->grad.empty())
            a->grad = Tensor::zeros(a->val.shape());
        for (int64_t o = 0; o < v.outer; o++)
            for (int64_t i = 0; i < len; i++) {
                const double* src = n.grad.data() + (o * len + i) * v.inner;
                double* dst = a->grad.data() + (o * v.axis + start + i) * v.inner;
                for (int64_t k = 0; k < v.inner; k++)
                    dst[k] += src[k];
            }
    });
}

Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty())
        fail("concat", "no inputs");
    std::vector<int64_t> out_shape = xs[0]->val.shape();
    int64_t total = 0;
    for (const auto& x : xs) {
        if (x->val.rank() != xs[0]->val.rank())
            fail("concat", "rank mismatch");
        for (size_t i = 0; i < out_shape.size(); i++)
            if ((int)i != axis && x->val.dim(i) != out_shape[i])
                fail("concat", "shape mismatch " + x->val.shape_str() + " vs " + xs[0]->val.shape_str());
        total += x->val.dim(axis);
    }
    out_shape[(size_t)axis] = total;
    Tensor out(out_shape);
    AxisView ov = axis_view(out, axis, "concat");
    std::vector<int64_t> sizes;
    int64_t pos = 0;
    for (const auto& x : xs) {
        int64_t len = x->val.dim(axis);
        sizes.push_back(len);
        for (int64_t o = 0; o < ov.outer; o++)
            for (int64_t i = 0; i < len; i++)
                std::copy_n(x->val.data() + (o * len + i) * ov.inner, ov.inner,
                            out.data() + (o * ov.axis + pos + i) * ov.inner);
        pos += len;
    }
    return make(std::move(out), xs, "concat", [ov, sizes](Node& n) {
        int64_t pos = 0;
        for (size_t pi = 0; pi < n.parents.size(); pi++) {
            const Var& p = n.parents[pi];
            int64_t len = sizes[pi];
            if (p->requires_grad) {
                if (p->grad.empty())
                    p->grad = Tensor::zeros(p->val.shape());
                for (int64_t o = 0; o < ov.outer; o++)
                    for (int64_t i = 0; i < len; i++) {
                        const double* src = n.grad.data() + (o * ov.axis + pos + i) * ov.inner;
                        double* dst = p->grad.data() + (o * len + i) * ov.inner;
                        for (int64_t k = 0; k < ov.inner; k++)
                            dst[k] += src[k];
                    }
            }
            pos += len;
        }
    });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    check_rank("conv2d", x, 3);
    if (w->val.rank() != 4)
        fail("conv2d", "weight must be [co,ci,kh,kw], got " + w->val.shape_str());
    check_rank("conv2d", b, 1);
    int64_t ci = x->val.dim(0), h = x->val.dim(1), wd = x->val.dim(2);
    int64_t co = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
    if (w->val.dim(1) != ci)
        fail("conv2d", "input channels " + std::to_string(ci) + " vs weight " + w->val.shape_str());
    if (b->val.dim(0) != co)
        fail("conv2d", "bias " + b->val.shape_str() + " vs out channels " + std::to_string(co));
    if (stride < 1)
        fail("conv2d", "stride must be >= 1");
    int64_t ho = (h + 2 * pad - kh) / stride + 1;
    int64_t wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho < 1 || wo < 1)
        fail("conv2d", "kernel larger than padded input");

    Tensor out({co, ho, wo});
    for (int64_t oc = 0; oc < co; oc++) {
        double bias = b->val[oc];
        for (int64_t oy = 0; oy < ho; oy++)
            for (int64_t ox = 0; ox < wo; ox++) {
                double s = bias;
                for (int64_t icn = 0; icn < ci; icn++) {
                    const double* xc = x->val.data() + icn * h * wd;
                    const double* wc = w->val.data() + ((oc * ci + icn) * kh) * kw;
                    for (int64_t ky = 0; ky < kh; ky++) {
                        int64_t iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t kx = 0; kx < kw; kx++) {
                            int64_t ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= wd) continue;
                            s += wc[ky * kw + kx] * xc[iy * wd + ix];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = s;
            }
    }

    return make(std::move(out), {x, w, b}, "conv2d",
                [ci, h, wd, co, kh, kw, ho, wo, stride, pad](Node& n) {
        const Var& x = n.parents[0];
        const Var& w = n.parents[1];
        const Var& b = n.parents[2];
        bool need_x = x->requires_grad;
        bool need_w = w->requires_grad;
        if (need_x && x->grad.empty())
            x->grad = Tensor::zeros(x->val.shape());
        if (need_w && w->grad.empty())
            w->grad = Tensor::zeros(w->val.shape());
        if (b->requires_grad) {
            Tensor db({co});
            for (int64_t oc = 0; oc < co; oc++) {
                double s = 0.0;
                const double* g = n.grad.data() + oc * ho * wo;
                for (int64_t i = 0; i < ho * wo; i++)
                    s += g[i];
                db[oc] = s;
            }
            Node::accum(b, db);
        }
        if (!need_x && !need_w)
            return;
        for (int64_t oc = 0; oc < co; oc++)
            for (int64_t oy = 0; oy < ho; oy++)
                for (int64_t ox = 0; ox < wo; ox++) {
                    double g = n.grad[(oc * ho + oy) * wo + ox];
                    if (g == 0.0) continue;
                    for (int64_t icn = 0; icn < ci; icn++) {
                        const double* xc = x->val.data() + icn * h * wd;
                        const double* wc = w->val.data() + ((oc * ci + icn) * kh) * kw;
                        double* gx = need_x ? x->grad.data() + icn * h * wd : nullptr;
                        double* gw = need_w ? w->grad.data() + ((oc * ci + icn) * kh) * kw : nullptr;
                        for (int64_t ky = 0; ky < kh; ky++) {
                            int64_t iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; kx++) {
                                int64_t ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wd) continue;
                                if (need_w) gw[ky * kw + kx] += g * xc[iy * wd + ix];
                                if (need_x) gx[iy * wd + ix] += g * wc[ky * kw + kx];
                            }
                        }
                    }
                }
    });
}

Var upsample2(const Var& x) {
    check_rank("upsample2", x, 3);
    int64_t c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    Tensor out({c, h * 2, w * 2});
    for (int64_t ch = 0; ch < c; ch++)
        for (int64_t y = 0; y < h; y++)
            for (int64_t xx = 0; xx < w; xx++) {
                double v = x->val[(ch * h + y) * w + xx];
                double* o = out.data() + (ch * h * 2 + y * 2) * w * 2 + xx * 2;
                o[0] = v;
                o[1] = v;
                o[w * 2] = v;
                o[w * 2 + 1] = v;
            }
    return make(std::move(out), {x}, "upsample2", [c, h, w](Node& n) {
        Tensor da({c, h, w});
        for (int64_t ch = 0; ch < c; ch++)
            for (int64_t y = 0; y < h; y++)
                for (int64_t xx = 0; xx < w; xx++) {
                    const double* g = n.grad.data() + (ch * h * 2 + y * 2) * w * 2 + xx * 2;
                    da[(ch * h + y) * w + xx] = g[0] + g[1] + g[w * 2] + g[w * 2 + 1];
                }
        Node::accum(n.parents[0], da);
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    check_rank("group_norm", x, 3);
    check_rank("group_norm", gamma, 1);
    check_rank("group_norm", beta, 1);
    int64_t c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    if (gamma->val.dim(0) != c || beta->val.dim(0) != c)
        fail("group_norm", "scale/shift must have one entry per channel");
    if (groups < 1 || c % groups != 0)
        fail("group_norm", std::to_string(c) + " channels not divisible into " +
                               std::to_string(groups) + " groups");
    int64_t cg = c / groups;       // channels per group
    int64_t m = cg * h * w;        // elements per group
    Tensor xhat({c, h, w});
    std::vector<double> inv_std((size_t)groups);
    for (int64_t g = 0; g < groups; g++) {
        const double* xs = x->val.data() + g * m;
        double mean = 0.0;
        for (int64_t i = 0; i < m; i++)
            mean += xs[i];
        mean /= (double)m;
        double var = 0.0;
        for (int64_t i = 0; i < m; i++) {
            double d = xs[i] - mean;
            var += d * d;
        }
        var /= (double)m;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[(size_t)g] = is;
        double* xh = xhat.data() + g * m;
        for (int64_t i = 0; i < m; i++)
            xh[i] = (xs[i] - mean) * is;
    }
    Tensor out({c, h, w});
    for (int64_t ch = 0; ch < c; ch++) {
        double ga = gamma->val[ch], be = beta->val[ch];
        const double* xh = xhat.data() + ch * h * w;
        double* o = out.data() + ch * h * w;
        for (int64_t i = 0; i < h * w; i++)
            o[i] = ga * xh[i] + be;
    }
    return make(std::move(out), {x, gamma, beta}, "group_norm",
                [c, h, w, groups, cg, m, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Node& n) {
        const Var& x = n.parents[0];
        const Var& gamma = n.parents[1];
        const Var& beta = n.parents[2];
        int64_t hw = h * w;
        if (gamma->requires_grad) {
            Tensor dg({c});
            for (int64_t ch = 0; ch < c; ch++) {
                const double* g = n.grad.data() + ch * hw;
                const double* xh = xhat.data() + ch * hw;
                double s = 0.0;
                for (int64_t i = 0; i < hw; i++)
                    s += g[i] * xh[i];
                dg[ch] = s;
            }
            Node::accum(gamma, dg);
        }
        if (beta->requires_grad) {
            Tensor db({c});
            for (int64_t ch = 0; ch < c; ch++) {
                const double* g = n.grad.data() + ch * hw;
                double s = 0.0;
                for (int64_t i = 0; i < hw; i++)
                    s += g[i];
                db[ch] = s;
            }
            Node::accum(beta, db);
        }
        if (!x->requires_grad)
            return;
        Tensor da({c, h, w});
        for (int64_t g = 0; g < groups; g++) {
            // dxhat = grad * gamma(channel); then the standard normalization
            // backward over the group's m elements.
            std::vector<double> dxh((size_t)m);
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            const double* xh = xhat.data() + g * m;
            for (int64_t i = 0; i < m; i++) {
                int64_t ch = g * cg + i / hw;
                double v = n.grad[g * m + i] * gamma->val[ch];
                dxh[(size_t)i] = v;
                sum_dxh += v;
                sum_dxh_xh += v * xh[i];
            }
            double is = inv_std[(size_t)g];
            double inv_m = 1.0 / (double)m;
            for (int64_t i = 0; i < m; i++)
                da[g * m + i] =
                    is * (dxh[(size_t)i] - inv_m * sum_dxh - xh[i] * inv_m * sum_dxh_xh);
        }
        Node::accum(x, da);
    });
}

Var add_channel_bias(const Var& x, const Var& b) {
    check_rank("add_channel_bias", x, 3);
    check_rank("add_channel_bias", b, 1);
    int64_t c = x->val.dim(0), hw = x->val.dim(1) * x->val.dim(2);
    if (b->val.dim(0) != c)
        fail("add_channel_bias", "bias " + b->val.shape_str() + " vs channels " + std::to_string(c));
    Tensor out = x->val;
    for (int64_t ch = 0; ch < c; ch++) {
        double v = b->val[ch];
        double* o = out.data() + ch * hw;
        for (int64_t i = 0; i < hw; i++)
            o[i] += v;
    }
    return make(std::move(out), {x, b}, "add_channel_bias", [c, hw](Node& n) {
        Node::accum(n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor db({c});
            for (int64_t ch = 0; ch < c; ch++) {
                const double* g = n.grad.data() + ch * hw;
                double s = 0.0;
                for (int64_t i = 0; i < hw; i++)
                    s += g[i];
                db[ch] = s;
            }
            Node::accum(n.parents[1], db);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    return add_row_bias(matmul_nt(x, w), b);
}

Var to_tokens(const Var& x) {
    check_rank("to_tokens", x, 3);
    int64_t c = x->val.dim(0), hw = x->val.dim(1) * x->val.dim(2);
    return transpose2(reshape(x, {c, hw}));
}

Var from_tokens(const Var& t, int64_t h, int64_t w) {
    check_rank("from_tokens", t, 2);
    if (t->val.dim(0) != h * w)
        fail("from_tokens", "token count " + std::to_string(t->val.dim(0)) + " vs " +
                                std::to_string(h) + "x" + std::to_string(w));
    return reshape(transpose2(t), {t->val.dim(1), h, w});
}

void backward(const Var& root) {
    if (!root)
        throw std::invalid_argument("backward: null root");
    if (root->val.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar, got " + root->val.shape_str());
    if (!root->requires_grad)
        return;  // nothing trainable below

    // Iterative post-order DFS; recursion would overflow on deep graphs.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second)
                stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad = Tensor::full(root->val.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->has_grad())
            n->backward_fn(*n);
    }
}

}  // namespace refgen::ag
