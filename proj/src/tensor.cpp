#include "matchseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>

namespace matchseg {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace {

void check_shape_valid(const Shape& s) {
    if (s.empty()) throw shape_error("rank-0 tensors are not supported");
    for (int d : s)
        if (d <= 0) throw shape_error("non-positive dimension in " + shape_str(s));
}

// outer * n * inner decomposition around an axis
struct AxisSplit {
    std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw shape_error("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSplit sp{1, static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]), 1};
    for (int i = 0; i < axis; ++i) sp.outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
        sp.inner *= static_cast<std::size_t>(s[i]);
    return sp;
}

} // namespace

// --- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape_valid(shape);
    auto d = std::make_shared<TensorData>();
    d->value.assign(shape_numel(shape), 0.0f);
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.d_->value.begin(), t.d_->value.end(), v);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    check_shape_valid(shape);
    if (data.size() != shape_numel(shape))
        throw shape_error("data length " + std::to_string(data.size()) + " does not match " +
                          shape_str(shape));
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->value = std::move(data);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

float Tensor::item() const {
    if (numel() != 1) throw shape_error("item() requires a scalar, got " + shape_str(shape()));
    return d_->value[0];
}

std::span<const float> Tensor::grad() const { return d_->grad; }

std::span<float> Tensor::grad_mut() {
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0f);
    return d_->grad;
}

void Tensor::zero_grad() {
    std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
}

Tensor Tensor::clone(bool requires_grad) const {
    return from_data(d_->shape, d_->value, requires_grad);
}

// --- Tape --------------------------------------------------------------------

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape* Tape::current() { return g_current_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_current_tape) { g_current_tape = &tape; }
TapeScope::~TapeScope() { g_current_tape = prev_; }

namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::current()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class D>
struct OpBase : OpNode {
    void pull(AdjointStore<float>& a) const override {
        static_cast<const D*>(this)->pull_impl(a);
    }
    void pull(AdjointStore<double>& a) const override {
        static_cast<const D*>(this)->pull_impl(a);
    }
};

using NodePtr = std::shared_ptr<TensorData>;

// --- conv2d -----------------------------------------------------------------

struct Conv2dNode : OpBase<Conv2dNode> {
    NodePtr x, w, b, out;
    int ci, h, wdt, co, kh, kw;

    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy) return;
        const int ph = kh / 2, pw = kw / 2;
        const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(wdt);
        if (b->requires_grad) {
            auto& gb = s.at_or_zero(b.get());
            for (int oc = 0; oc < co; ++oc) {
                T acc = 0;
                const T* g = gy->data() + static_cast<std::size_t>(oc) * plane;
                for (std::size_t i = 0; i < plane; ++i) acc += g[i];
                gb[static_cast<std::size_t>(oc)] += acc;
            }
        }
        if (w->requires_grad) {
            auto& gw = s.at_or_zero(w.get());
            for (int oc = 0; oc < co; ++oc) {
                const T* g = gy->data() + static_cast<std::size_t>(oc) * plane;
                for (int ic = 0; ic < ci; ++ic) {
                    const float* xin = x->value.data() + static_cast<std::size_t>(ic) * plane;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int dy = ky - ph;
                        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                        for (int kx = 0; kx < kw; ++kx) {
                            const int dx = kx - pw;
                            const int x0 = std::max(0, -dx), x1 = std::min(wdt, wdt - dx);
                            T acc = 0;
                            for (int y = y0; y < y1; ++y) {
                                const float* xr = xin + static_cast<std::size_t>(y + dy) * wdt + dx;
                                const T* gr = g + static_cast<std::size_t>(y) * wdt;
                                for (int xx = x0; xx < x1; ++xx) acc += T(xr[xx]) * gr[xx];
                            }
                            gw[((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        }
        if (x->requires_grad) {
            auto& gx = s.at_or_zero(x.get());
            for (int oc = 0; oc < co; ++oc) {
                const T* g = gy->data() + static_cast<std::size_t>(oc) * plane;
                for (int ic = 0; ic < ci; ++ic) {
                    T* gxi = gx.data() + static_cast<std::size_t>(ic) * plane;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int dy = ky - ph;
                        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                        for (int kx = 0; kx < kw; ++kx) {
                            const int dx = kx - pw;
                            const int x0 = std::max(0, -dx), x1 = std::min(wdt, wdt - dx);
                            const T wv =
                                T(w->value[((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw +
                                           kx]);
                            if (wv == T(0)) continue;
                            for (int y = y0; y < y1; ++y) {
                                T* gxr = gxi + static_cast<std::size_t>(y + dy) * wdt + dx;
                                const T* gr = g + static_cast<std::size_t>(y) * wdt;
                                for (int xx = x0; xx < x1; ++xx) gxr[xx] += wv * gr[xx];
                            }
                        }
                    }
                }
            }
        }
    }
};

// --- simple elementwise nodes -------------------------------------------------

struct LeakyReluNode : OpBase<LeakyReluNode> {
    NodePtr x, out;
    float slope;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        for (std::size_t i = 0; i < gx.size(); ++i)
            gx[i] += (x->value[i] >= 0.0f ? (*gy)[i] : T(slope) * (*gy)[i]);
    }
};

struct AddNode : OpBase<AddNode> {
    NodePtr a, b, out;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy) return;
        if (a->requires_grad) {
            auto& ga = s.at_or_zero(a.get());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*gy)[i];
        }
        if (b->requires_grad) {
            auto& gb = s.at_or_zero(b.get());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += (*gy)[i];
        }
    }
};

struct MulNode : OpBase<MulNode> {
    NodePtr a, b, out;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy) return;
        if (a->requires_grad) {
            auto& ga = s.at_or_zero(a.get());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*gy)[i] * T(b->value[i]);
        }
        if (b->requires_grad) {
            auto& gb = s.at_or_zero(b.get());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += (*gy)[i] * T(a->value[i]);
        }
    }
};

struct SigmoidNode : OpBase<SigmoidNode> {
    NodePtr x, out;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const T y = T(out->value[i]);
            gx[i] += (*gy)[i] * y * (T(1) - y);
        }
    }
};

struct LogNode : OpBase<LogNode> {
    NodePtr x, out;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*gy)[i] / T(x->value[i]);
    }
};

struct PowerNode : OpBase<PowerNode> {
    NodePtr x, out;
    float p;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const float xv = x->value[i];
            if (p == 0.0f || (xv == 0.0f && p < 1.0f)) continue; // derivative defined as 0
            gx[i] += (*gy)[i] * T(p) * T(std::pow(double(xv), double(p) - 1.0));
        }
    }
};

struct ClampNode : OpBase<ClampNode> {
    NodePtr x, out;
    float lo, hi;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const float xv = x->value[i];
            if (xv >= lo && xv <= hi) gx[i] += (*gy)[i];
        }
    }
};

struct ScaleNode : OpBase<ScaleNode> {
    NodePtr x, out;
    float s;
    template <class T>
    void pull_impl(AdjointStore<T>& st) const {
        const std::vector<T>* gy = st.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = st.at_or_zero(x.get());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += T(s) * (*gy)[i];
    }
};

struct AddScalarNode : OpBase<AddScalarNode> {
    NodePtr x, out;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*gy)[i];
    }
};

// --- structural nodes ----------------------------------------------------------

struct ReshapeNode : OpBase<ReshapeNode> {
    NodePtr x, out;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*gy)[i];
    }
};

struct Transpose2dNode : OpBase<Transpose2dNode> {
    NodePtr x, out;
    int m, n; // x is (m,n)
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                gx[static_cast<std::size_t>(i) * n + j] +=
                    (*gy)[static_cast<std::size_t>(j) * m + i];
    }
};

struct ConcatNode : OpBase<ConcatNode> {
    std::vector<NodePtr> parts;
    NodePtr out;
    int axis;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy) return;
        const AxisSplit sp = split_axis(out->shape, axis);
        std::size_t offset = 0; // offset within the concatenated axis
        for (const NodePtr& p : parts) {
            const std::size_t pn = static_cast<std::size_t>(p->shape[static_cast<std::size_t>(axis)]);
            if (p->requires_grad) {
                auto& gp = s.at_or_zero(p.get());
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    const T* src = gy->data() + (o * sp.n + offset) * sp.inner;
                    T* dst = gp.data() + o * pn * sp.inner;
                    for (std::size_t i = 0; i < pn * sp.inner; ++i) dst[i] += src[i];
                }
            }
            offset += pn;
        }
    }
};

struct RepeatNode : OpBase<RepeatNode> {
    NodePtr x, out;
    int axis, times;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        const AxisSplit sp = split_axis(x->shape, axis);
        const std::size_t block = sp.n * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const T* src = gy->data() + o * block * static_cast<std::size_t>(times);
            T* dst = gx.data() + o * block;
            for (int t = 0; t < times; ++t)
                for (std::size_t i = 0; i < block; ++i) dst[i] += src[static_cast<std::size_t>(t) * block + i];
        }
    }
};

struct Select0Node : OpBase<Select0Node> {
    NodePtr x, out;
    int index;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        const std::size_t block = out->value.size();
        T* dst = gx.data() + static_cast<std::size_t>(index) * block;
        for (std::size_t i = 0; i < block; ++i) dst[i] += (*gy)[i];
    }
};

// --- linear algebra / reductions ------------------------------------------------

struct MatmulNode : OpBase<MatmulNode> {
    NodePtr a, b, out;
    int m, n, p;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy) return;
        if (a->requires_grad) {
            auto& ga = s.at_or_zero(a.get());
            // ga[m,n] += gy[m,p] * b[n,p]^T  (row-major friendly: dot over p)
            for (int i = 0; i < m; ++i) {
                const T* gyr = gy->data() + static_cast<std::size_t>(i) * p;
                T* gar = ga.data() + static_cast<std::size_t>(i) * n;
                for (int k = 0; k < n; ++k) {
                    const float* br = b->value.data() + static_cast<std::size_t>(k) * p;
                    T acc = 0;
                    for (int j = 0; j < p; ++j) acc += gyr[j] * T(br[j]);
                    gar[k] += acc;
                }
            }
        }
        if (b->requires_grad) {
            auto& gb = s.at_or_zero(b.get());
            // gb[n,p] += a[m,n]^T * gy[m,p]
            for (int i = 0; i < m; ++i) {
                const float* ar = a->value.data() + static_cast<std::size_t>(i) * n;
                const T* gyr = gy->data() + static_cast<std::size_t>(i) * p;
                for (int k = 0; k < n; ++k) {
                    const T av = T(ar[k]);
                    if (av == T(0)) continue;
                    T* gbr = gb.data() + static_cast<std::size_t>(k) * p;
                    for (int j = 0; j < p; ++j) gbr[j] += av * gyr[j];
                }
            }
        }
    }
};

struct SoftmaxNode : OpBase<SoftmaxNode> {
    NodePtr x, out;
    int axis;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        const AxisSplit sp = split_axis(out->shape, axis);
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t in = 0; in < sp.inner; ++in) {
                const std::size_t base = o * sp.n * sp.inner + in;
                T dot = 0;
                for (std::size_t l = 0; l < sp.n; ++l) {
                    const std::size_t idx = base + l * sp.inner;
                    dot += (*gy)[idx] * T(out->value[idx]);
                }
                for (std::size_t l = 0; l < sp.n; ++l) {
                    const std::size_t idx = base + l * sp.inner;
                    gx[idx] += T(out->value[idx]) * ((*gy)[idx] - dot);
                }
            }
        }
    }
};

struct ReduceMeanNode : OpBase<ReduceMeanNode> {
    NodePtr x, out;
    int axis;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        const AxisSplit sp = split_axis(x->shape, axis);
        const T inv = T(1) / T(sp.n);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t l = 0; l < sp.n; ++l) {
                T* dst = gx.data() + (o * sp.n + l) * sp.inner;
                const T* src = gy->data() + o * sp.inner;
                for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += inv * src[in];
            }
    }
};

struct ReduceSumAllNode : OpBase<ReduceSumAllNode> {
    NodePtr x, out;
    bool mean;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        const T g = mean ? (*gy)[0] / T(x->value.size()) : (*gy)[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    }
};

struct BilinearResizeNode : OpBase<BilinearResizeNode> {
    NodePtr x, out;
    int c, ih, iw, oh, ow;
    template <class T>
    void pull_impl(AdjointStore<T>& s) const {
        const std::vector<T>* gy = s.find(out.get());
        if (!gy || !x->requires_grad) return;
        auto& gx = s.at_or_zero(x.get());
        const double sy = double(ih) / double(oh), sx = double(iw) / double(ow);
        for (int y = 0; y < oh; ++y) {
            const double fy = (y + 0.5) * sy - 0.5;
            int y0 = static_cast<int>(std::floor(fy));
            const double wy = fy - y0;
            int y1 = y0 + 1;
            y0 = std::clamp(y0, 0, ih - 1);
            y1 = std::clamp(y1, 0, ih - 1);
            for (int xo = 0; xo < ow; ++xo) {
                const double fx = (xo + 0.5) * sx - 0.5;
                int x0 = static_cast<int>(std::floor(fx));
                const double wx = fx - x0;
                int x1 = x0 + 1;
                x0 = std::clamp(x0, 0, iw - 1);
                x1 = std::clamp(x1, 0, iw - 1);
                const T w00 = T((1 - wy) * (1 - wx)), w01 = T((1 - wy) * wx);
                const T w10 = T(wy * (1 - wx)), w11 = T(wy * wx);
                for (int ch = 0; ch < this->c; ++ch) {
                    const T g = (*gy)[(static_cast<std::size_t>(ch) * oh + y) * ow + xo];
                    T* gp = gx.data() + static_cast<std::size_t>(ch) * ih * iw;
                    gp[static_cast<std::size_t>(y0) * iw + x0] += w00 * g;
                    gp[static_cast<std::size_t>(y0) * iw + x1] += w01 * g;
                    gp[static_cast<std::size_t>(y1) * iw + x0] += w10 * g;
                    gp[static_cast<std::size_t>(y1) * iw + x1] += w11 * g;
                }
            }
        }
    }
};

} // namespace

// --- operation implementations -------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.rank() != 3) throw shape_error("conv2d input must be (Cin,H,W), got " + shape_str(input.shape()));
    if (weight.rank() != 4)
        throw shape_error("conv2d weight must be (Cout,Cin,kh,kw), got " + shape_str(weight.shape()));
    if (bias.rank() != 1) throw shape_error("conv2d bias must be (Cout,), got " + shape_str(bias.shape()));
    const int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != ci)
        throw shape_error("conv2d channel mismatch: input Cin=" + std::to_string(ci) + ", weight Cin=" +
                          std::to_string(weight.dim(1)));
    if (bias.dim(0) != co) throw shape_error("conv2d bias size must equal Cout");
    if (kh % 2 == 0 || kw % 2 == 0) throw shape_error("conv2d kernel sizes must be odd");

    Tensor out = Tensor::zeros({co, h, w});
    const int ph = kh / 2, pw = kw / 2;
    const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    float* o = out.values_mut().data();
    const float* xv = input.values().data();
    const float* wv = weight.values().data();
    const float* bv = bias.values().data();
    for (int oc = 0; oc < co; ++oc) {
        float* op = o + static_cast<std::size_t>(oc) * plane;
        std::fill(op, op + plane, bv[oc]);
        for (int ic = 0; ic < ci; ++ic) {
            const float* xp = xv + static_cast<std::size_t>(ic) * plane;
            for (int ky = 0; ky < kh; ++ky) {
                const int dy = ky - ph;
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                for (int kx = 0; kx < kw; ++kx) {
                    const int dx = kx - pw;
                    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    const float wgt = wv[((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx];
                    if (wgt == 0.0f) continue;
                    for (int y = y0; y < y1; ++y) {
                        float* orow = op + static_cast<std::size_t>(y) * w;
                        const float* xrow = xp + static_cast<std::size_t>(y + dy) * w + dx;
                        for (int xx = x0; xx < x1; ++xx) orow[xx] += wgt * xrow[xx];
                    }
                }
            }
        }
    }
    if (tracking({&input, &weight, &bias})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<Conv2dNode>();
        node->x = input.node();
        node->w = weight.node();
        node->b = bias.node();
        node->out = out.node();
        node->ci = ci;
        node->h = h;
        node->wdt = w;
        node->co = co;
        node->kh = kh;
        node->kw = kw;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor leaky_relu(const Tensor& x, float slope) {
    if (!(slope > 0.0f && slope < 1.0f)) throw value_error("leaky_relu slope must be in (0,1)");
    Tensor out = Tensor::zeros(x.shape());
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) o[i] = xv[i] >= 0.0f ? xv[i] : slope * xv[i];
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<LeakyReluNode>();
        node->x = x.node();
        node->out = out.node();
        node->slope = slope;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    if (x.rank() != 3) throw shape_error("bilinear_resize input must be (C,H,W)");
    if (out_h < 1 || out_w < 1) throw shape_error("bilinear_resize output sizes must be >= 1");
    const int c = x.dim(0), ih = x.dim(1), iw = x.dim(2);
    Tensor out = Tensor::zeros({c, out_h, out_w});
    const double sy = double(ih) / double(out_h), sx = double(iw) / double(out_w);
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (int y = 0; y < out_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        const double wy = fy - y0;
        int y1 = y0 + 1;
        y0 = std::clamp(y0, 0, ih - 1);
        y1 = std::clamp(y1, 0, ih - 1);
        for (int xo = 0; xo < out_w; ++xo) {
            const double fx = (xo + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            int x1 = x0 + 1;
            x0 = std::clamp(x0, 0, iw - 1);
            x1 = std::clamp(x1, 0, iw - 1);
            const double w00 = (1 - wy) * (1 - wx), w01 = (1 - wy) * wx;
            const double w10 = wy * (1 - wx), w11 = wy * wx;
            for (int ch = 0; ch < c; ++ch) {
                const float* p = xv + static_cast<std::size_t>(ch) * ih * iw;
                const double v = w00 * p[static_cast<std::size_t>(y0) * iw + x0] +
                                 w01 * p[static_cast<std::size_t>(y0) * iw + x1] +
                                 w10 * p[static_cast<std::size_t>(y1) * iw + x0] +
                                 w11 * p[static_cast<std::size_t>(y1) * iw + x1];
                o[(static_cast<std::size_t>(ch) * out_h + y) * out_w + xo] = static_cast<float>(v);
            }
        }
    }
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<BilinearResizeNode>();
        node->x = x.node();
        node->out = out.node();
        node->c = c;
        node->ih = ih;
        node->iw = iw;
        node->oh = out_h;
        node->ow = out_w;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw shape_error("matmul requires rank-2 tensors");
    const int m = a.dim(0), n = a.dim(1), p = b.dim(1);
    if (b.dim(0) != n)
        throw shape_error("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, p});
    const float* av = a.values().data();
    const float* bv = b.values().data();
    float* o = out.values_mut().data();
    for (int i = 0; i < m; ++i) {
        float* orow = o + static_cast<std::size_t>(i) * p;
        const float* arow = av + static_cast<std::size_t>(i) * n;
        for (int k = 0; k < n; ++k) {
            const float aval = arow[k];
            if (aval == 0.0f) continue;
            const float* brow = bv + static_cast<std::size_t>(k) * p;
            for (int j = 0; j < p; ++j) orow[j] += aval * brow[j];
        }
    }
    if (tracking({&a, &b})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<MatmulNode>();
        node->a = a.node();
        node->b = b.node();
        node->out = out.node();
        node->m = m;
        node->n = n;
        node->p = p;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor softmax(const Tensor& x, int axis) {
    const AxisSplit sp = split_axis(x.shape(), axis);
    Tensor out = Tensor::zeros(x.shape());
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (std::size_t ot = 0; ot < sp.outer; ++ot) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = ot * sp.n * sp.inner + in;
            float mx = xv[base];
            for (std::size_t l = 1; l < sp.n; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
            double sum = 0.0;
            for (std::size_t l = 0; l < sp.n; ++l) {
                const float e = std::exp(xv[base + l * sp.inner] - mx);
                o[base + l * sp.inner] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::size_t l = 0; l < sp.n; ++l)
                o[base + l * sp.inner] = static_cast<float>(o[base + l * sp.inner] * inv);
        }
    }
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<SoftmaxNode>();
        node->x = x.node();
        node->out = out.node();
        node->axis = axis;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor reduce_mean(const Tensor& x, int axis) {
    const AxisSplit sp = split_axis(x.shape(), axis);
    Shape out_shape;
    for (int i = 0; i < x.rank(); ++i)
        if (i != axis) out_shape.push_back(x.dim(i));
    if (out_shape.empty()) out_shape = {1};
    Tensor out = Tensor::zeros(out_shape);
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    const double inv = 1.0 / double(sp.n);
    for (std::size_t ot = 0; ot < sp.outer; ++ot)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            double acc = 0.0;
            for (std::size_t l = 0; l < sp.n; ++l) acc += xv[(ot * sp.n + l) * sp.inner + in];
            o[ot * sp.inner + in] = static_cast<float>(acc * inv);
        }
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<ReduceMeanNode>();
        node->x = x.node();
        node->out = out.node();
        node->axis = axis;
        Tape::current()->push(std::move(node));
    }
    return out;
}

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw shape_error(std::string(op) + " requires equal shapes, got " + shape_str(a.shape()) +
                          " and " + shape_str(b.shape()));
}
} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const float* av = a.values().data();
    const float* bv = b.values().data();
    float* o = out.values_mut().data();
    for (std::size_t i = 0; i < a.numel(); ++i) o[i] = av[i] + bv[i];
    if (tracking({&a, &b})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<AddNode>();
        node->a = a.node();
        node->b = b.node();
        node->out = out.node();
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const float* av = a.values().data();
    const float* bv = b.values().data();
    float* o = out.values_mut().data();
    for (std::size_t i = 0; i < a.numel(); ++i) o[i] = av[i] * bv[i];
    if (tracking({&a, &b})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<MulNode>();
        node->a = a.node();
        node->b = b.node();
        node->out = out.node();
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const float v = xv[i];
        if (v >= 0.0f) {
            o[i] = 1.0f / (1.0f + std::exp(-v));
        } else {
            const float e = std::exp(v);
            o[i] = e / (1.0f + e);
        }
    }
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<SigmoidNode>();
        node->x = x.node();
        node->out = out.node();
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor log(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        if (!(xv[i] > 0.0f)) throw value_error("log requires strictly positive inputs");
        o[i] = std::log(xv[i]);
    }
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<LogNode>();
        node->x = x.node();
        node->out = out.node();
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor power(const Tensor& x, float p) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        if (xv[i] < 0.0f) throw value_error("power requires non-negative inputs");
        o[i] = static_cast<float>(std::pow(double(xv[i]), double(p)));
    }
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<PowerNode>();
        node->x = x.node();
        node->out = out.node();
        node->p = p;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor clamp(const Tensor& x, float lo, float hi) {
    if (!(lo <= hi)) throw value_error("clamp requires lo <= hi");
    Tensor out = Tensor::zeros(x.shape());
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) o[i] = std::min(std::max(xv[i], lo), hi);
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<ClampNode>();
        node->x = x.node();
        node->out = out.node();
        node->lo = lo;
        node->hi = hi;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor scale(const Tensor& x, float s) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) o[i] = s * xv[i];
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<ScaleNode>();
        node->x = x.node();
        node->out = out.node();
        node->s = s;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor add_scalar(const Tensor& x, float c) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) o[i] = xv[i] + c;
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<AddScalarNode>();
        node->x = x.node();
        node->out = out.node();
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw shape_error("concat requires at least one tensor");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw shape_error("concat axis out of range");
    int axis_total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != rank) throw shape_error("concat rank mismatch");
        for (int i = 0; i < rank; ++i)
            if (i != axis && t.dim(i) != parts[0].dim(i))
                throw shape_error("concat non-axis dimension mismatch: " + shape_str(t.shape()) +
                                  " vs " + shape_str(parts[0].shape()));
        axis_total += t.dim(axis);
    }
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<std::size_t>(axis)] = axis_total;
    Tensor out = Tensor::zeros(out_shape);
    const AxisSplit sp = split_axis(out_shape, axis);
    float* o = out.values_mut().data();
    std::size_t offset = 0;
    bool any_rg = false;
    for (const Tensor& t : parts) {
        const std::size_t pn = static_cast<std::size_t>(t.dim(axis));
        const float* src = t.values().data();
        for (std::size_t ot = 0; ot < sp.outer; ++ot)
            std::copy(src + ot * pn * sp.inner, src + (ot + 1) * pn * sp.inner,
                      o + (ot * sp.n + offset) * sp.inner);
        offset += pn;
        any_rg = any_rg || t.requires_grad();
    }
    if (Tape::current() && any_rg) {
        out.set_requires_grad(true);
        auto node = std::make_unique<ConcatNode>();
        for (const Tensor& t : parts) node->parts.push_back(t.node());
        node->out = out.node();
        node->axis = axis;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    check_shape_valid(new_shape);
    if (shape_numel(new_shape) != x.numel())
        throw shape_error("reshape element count mismatch: " + shape_str(x.shape()) + " -> " +
                          shape_str(new_shape));
    Tensor out = Tensor::from_data(std::move(new_shape),
                                   std::vector<float>(x.values().begin(), x.values().end()));
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<ReshapeNode>();
        node->x = x.node();
        node->out = out.node();
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor repeat(const Tensor& x, int axis, int times) {
    if (times < 1) throw shape_error("repeat times must be >= 1");
    const AxisSplit sp = split_axis(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] *= times;
    Tensor out = Tensor::zeros(out_shape);
    const std::size_t block = sp.n * sp.inner;
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (std::size_t ot = 0; ot < sp.outer; ++ot)
        for (int t = 0; t < times; ++t)
            std::copy(xv + ot * block, xv + (ot + 1) * block,
                      o + (ot * static_cast<std::size_t>(times) + t) * block);
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<RepeatNode>();
        node->x = x.node();
        node->out = out.node();
        node->axis = axis;
        node->times = times;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw shape_error("transpose2d requires a rank-2 tensor");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({n, m});
    const float* xv = x.values().data();
    float* o = out.values_mut().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            o[static_cast<std::size_t>(j) * m + i] = xv[static_cast<std::size_t>(i) * n + j];
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<Transpose2dNode>();
        node->x = x.node();
        node->out = out.node();
        node->m = m;
        node->n = n;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor select0(const Tensor& x, int index) {
    if (x.rank() < 2) throw shape_error("select0 requires rank >= 2");
    if (index < 0 || index >= x.dim(0)) throw shape_error("select0 index out of range");
    Shape out_shape(x.shape().begin() + 1, x.shape().end());
    const std::size_t block = shape_numel(out_shape);
    std::vector<float> data(x.values().begin() + static_cast<std::ptrdiff_t>(block) * index,
                            x.values().begin() + static_cast<std::ptrdiff_t>(block) * (index + 1));
    Tensor out = Tensor::from_data(std::move(out_shape), std::move(data));
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<Select0Node>();
        node->x = x.node();
        node->out = out.node();
        node->index = index;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor stack0(std::span<const Tensor> parts) {
    if (parts.empty()) throw shape_error("stack0 requires at least one tensor");
    std::vector<Tensor> expanded;
    expanded.reserve(parts.size());
    for (const Tensor& t : parts) {
        Shape s = t.shape();
        s.insert(s.begin(), 1);
        expanded.push_back(reshape(t, std::move(s)));
    }
    return concat(expanded, 0);
}

Tensor reduce_sum_all(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.values()) acc += v;
    Tensor out = Tensor::from_data({1}, {static_cast<float>(acc)});
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<ReduceSumAllNode>();
        node->x = x.node();
        node->out = out.node();
        node->mean = false;
        Tape::current()->push(std::move(node));
    }
    return out;
}

Tensor reduce_mean_all(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.values()) acc += v;
    Tensor out = Tensor::from_data({1}, {static_cast<float>(acc / double(x.numel()))});
    if (tracking({&x})) {
        out.set_requires_grad(true);
        auto node = std::make_unique<ReduceSumAllNode>();
        node->x = x.node();
        node->out = out.node();
        node->mean = true;
        Tape::current()->push(std::move(node));
    }
    return out;
}

// --- backward -----------------------------------------------------------------

namespace {

template <class T>
void backward_impl(const Tensor& loss, Tape& tape) {
    if (loss.numel() != 1)
        throw value_error("backward requires a scalar loss, got " + shape_str(loss.shape()));
    AdjointStore<T> store;
    store.at_or_zero(loss.node().get())[0] += T(1);
    const auto& ops = tape.ops();
    for (auto it = ops.rbegin(); it != ops.rend(); ++it) (*it)->pull(store);
    for (auto& [node, adj] : store) {
        if (!node->requires_grad) continue;
        if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0f);
        for (std::size_t i = 0; i < adj.size(); ++i)
            node->grad[i] += static_cast<float>(adj[i]);
    }
}

} // namespace

void backward(const Tensor& loss, Tape& tape) { backward_impl<float>(loss, tape); }
void backward_fp64(const Tensor& loss, Tape& tape) { backward_impl<double>(loss, tape); }

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    if (!(eps > 0.0 && eps <= 1e-2)) throw value_error("grad_check eps must be in (0, 1e-2]");

    Tensor xa = x.clone(/*requires_grad=*/true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = f(xa);
        if (loss.numel() != 1) throw value_error("grad_check requires a scalar-valued function");
        backward_fp64(loss, tape);
    }
    std::vector<float> analytic(xa.grad().begin(), xa.grad().end());
    if (analytic.empty()) analytic.assign(x.numel(), 0.0f);

    double max_err = 0.0;
    std::vector<float> base(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<float> vp = base, vm = base;
        vp[i] = static_cast<float>(double(base[i]) + eps);
        vm[i] = static_cast<float>(double(base[i]) - eps);
        const double fp = double(f(Tensor::from_data(x.shape(), vp)).item());
        const double fm = double(f(Tensor::from_data(x.shape(), vm)).item());
        const double denom = double(vp[i]) - double(vm[i]);
        const double numeric = (fp - fm) / denom;
        const double a = double(analytic[i]);
        const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace matchseg
