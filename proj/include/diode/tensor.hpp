#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "diode/common.hpp"

namespace diode {

// Dense n-dimensional array of 64-bit reals, row-major. Parameters,
// images, and targets all live in this container; the Tape holds the
// graph, the Tensor holds the persistent value and gradient buffers.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty, or data.size() entries
    bool tracked = false;

    Tensor() = default;

    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
        for (int d : shape)
            if (d <= 0) throw ConfigError("tensor dims must be positive");
        data.assign(static_cast<size_t>(numel(shape)), fill);
    }

    Tensor(std::vector<int> s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<int64_t>(data.size()) != numel(shape))
            throw ConfigError("tensor data length does not match shape");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static int64_t numel(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }

    void ensureGrad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }

    void zeroGrad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }
};

// Wengert list. Every differentiable operation appends one record;
// records are in topological order by construction and one backward
// traversal visits each record exactly once, in reverse.
class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Var leaf(Tensor& t, std::string name = "") {
        Node node;
        node.shape = t.shape;
        node.val = t.data;
        node.tracked = true;
        node.sink = &t;
        node.name = std::move(name);
        return pushNode(std::move(node));
    }

    Var constant(const Tensor& t) {
        Node node;
        node.shape = t.shape;
        node.val = t.data;
        return pushNode(std::move(node));
    }

    Var constant(std::vector<int> shape, std::vector<double> values) {
        if (static_cast<int64_t>(values.size()) != Tensor::numel(shape))
            throw ConfigError("constant data length does not match shape");
        Node node;
        node.shape = std::move(shape);
        node.val = std::move(values);
        return pushNode(std::move(node));
    }

    Var scalarConst(double v) { return constant({1}, {v}); }

    // ---- elementwise unary ----

    Var relu(Var x) { return unary(Op::Relu, x); }
    Var sigmoid(Var x) { return unary(Op::Sigmoid, x); }
    // log(sigmoid(x)), evaluated in the numerically stable form.
    Var logSigmoid(Var x) { return unary(Op::LogSigmoid, x); }
    Var expv(Var x) { return unary(Op::Exp, x); }
    Var logv(Var x) { return unary(Op::Log, x); }
    Var neg(Var x) { return mulScalar(x, -1.0); }

    // Clamp to [lo, hi]; gradient passes only strictly inside.
    Var clamp(Var x, double lo, double hi) {
        if (!(lo < hi)) throw UsageError("clamp requires lo < hi");
        const Node& n = node(x);
        Node out;
        out.shape = n.shape;
        out.val.resize(n.val.size());
        for (size_t i = 0; i < n.val.size(); ++i)
            out.val[i] = n.val[i] < lo ? lo : (n.val[i] > hi ? hi : n.val[i]);
        Var v = pushNodeTracked(std::move(out), n.tracked);
        if (node(v).tracked) {
            Record r;
            r.op = Op::Clamp;
            r.a = x.id;
            r.out = v.id;
            r.d0 = lo;
            r.d1 = hi;
            records_.push_back(r);
        }
        return v;
    }

    // ---- elementwise binary (same shape, or one scalar operand) ----

    Var add(Var a, Var b) { return binary(Op::Add, a, b); }
    Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
    Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
    Var div(Var a, Var b) { return binary(Op::Div, a, b); }
    Var vmin(Var a, Var b) { return binary(Op::Min, a, b); }
    Var vmax(Var a, Var b) { return binary(Op::Max, a, b); }

    Var addScalar(Var x, double s) {
        Node out;
        out.shape = node(x).shape;
        out.val.resize(node(x).val.size());
        for (size_t i = 0; i < out.val.size(); ++i) out.val[i] = node(x).val[i] + s;
        return finishUnary(Op::AddS, x, std::move(out), s);
    }

    Var mulScalar(Var x, double s) {
        Node out;
        out.shape = node(x).shape;
        out.val.resize(node(x).val.size());
        for (size_t i = 0; i < out.val.size(); ++i) out.val[i] = node(x).val[i] * s;
        return finishUnary(Op::MulS, x, std::move(out), s);
    }

    // ---- reductions / views ----

    Var sum(Var x) {
        Node out;
        out.shape = {1};
        double acc = 0.0;
        for (double v : node(x).val) acc += v;
        out.val = {acc};
        return finishUnary(Op::Sum, x, std::move(out));
    }

    // Contiguous slice of the flat buffer (channel extraction on
    // row-major maps).
    Var slice(Var x, int64_t offset, int64_t count) {
        const Node& n = node(x);
        if (offset < 0 || count <= 0 || offset + count > static_cast<int64_t>(n.val.size()))
            throw UsageError("slice out of range");
        Node out;
        out.shape = {static_cast<int>(count)};
        out.val.assign(n.val.begin() + offset, n.val.begin() + offset + count);
        Var v = pushNodeTracked(std::move(out), n.tracked);
        if (node(v).tracked) {
            Record r;
            r.op = Op::Slice;
            r.a = x.id;
            r.out = v.id;
            r.i0 = offset;
            records_.push_back(r);
        }
        return v;
    }

    // ---- conv2d ----
    // input [N,Cin,H,W], weight [Cout,Cin,kH,kW], bias [Cout];
    // cross-correlation plus per-channel bias.
    Var conv2d(Var input, Var weight, Var bias, int stride, int padding) {
        const Node& in = node(input);
        const Node& w = node(weight);
        const Node& b = node(bias);
        if (in.shape.size() != 4 || w.shape.size() != 4 || b.shape.size() != 1)
            throw ConfigError("conv2d expects input[N,C,H,W], weight[Cout,Cin,kH,kW], bias[Cout]");
        const int N = in.shape[0], Cin = in.shape[1], H = in.shape[2], W = in.shape[3];
        const int Cout = w.shape[0], kH = w.shape[2], kW = w.shape[3];
        if (w.shape[1] != Cin) throw ConfigError("conv2d channel mismatch");
        if (b.shape[0] != Cout) throw ConfigError("conv2d bias mismatch");
        if (kH < 1 || kW < 1 || kH > H + 2 * padding || kW > W + 2 * padding)
            throw ConfigError("conv2d kernel does not fit the padded input");
        if (stride <= 0 || padding < 0) throw ConfigError("conv2d bad stride/padding");
        if ((H + 2 * padding - kH) % stride != 0 || (W + 2 * padding - kW) % stride != 0)
            throw ConfigError("conv2d output size is not integral");
        const int Ho = (H + 2 * padding - kH) / stride + 1;
        const int Wo = (W + 2 * padding - kW) / stride + 1;
        if (Ho <= 0 || Wo <= 0) throw ConfigError("conv2d output size must be positive");

        Node out;
        out.shape = {N, Cout, Ho, Wo};
        out.val.assign(static_cast<size_t>(N) * Cout * Ho * Wo, 0.0);
        convForward(in.val.data(), w.val.data(), b.val.data(), out.val.data(), N, Cin, H, W, Cout,
                    kH, kW, stride, padding, Ho, Wo);

        bool tracked = in.tracked || w.tracked || b.tracked;
        Var v = pushNodeTracked(std::move(out), tracked);
        if (tracked) {
            Record r;
            r.op = Op::Conv2d;
            r.a = input.id;
            r.b = weight.id;
            r.c = bias.id;
            r.out = v.id;
            r.i0 = stride;
            r.i1 = padding;
            records_.push_back(r);
        }
        return v;
    }

    // Summed Huber-clipped quadratic penalty: per element, quadratic
    // curv*d^2/2 while |curv*d| <= cap, linear with slope cap beyond,
    // d = x - anchor. Gradient magnitude never exceeds cap.
    Var huberPenaltySum(Var x, Var anchor, Var curvature, double cap) {
        const Node& xn = node(x);
        const Node& an = node(anchor);
        const Node& cn = node(curvature);
        if (xn.val.size() != an.val.size() || xn.val.size() != cn.val.size())
            throw ConfigError("huberPenaltySum operand size mismatch");
        if (cap <= 0) throw UsageError("huberPenaltySum cap must be positive");
        double acc = 0.0;
        for (size_t i = 0; i < xn.val.size(); ++i) {
            const double d = xn.val[i] - an.val[i];
            const double curv = cn.val[i];
            const double g = curv * d;
            if (std::fabs(g) <= cap) {
                acc += 0.5 * curv * d * d;
            } else if (curv > 0.0) {
                acc += cap * std::fabs(d) - 0.5 * cap * cap / curv;
            }
        }
        Node out;
        out.shape = {1};
        out.val = {acc};
        Var v = pushNodeTracked(std::move(out), xn.tracked);
        if (node(v).tracked) {
            Record r;
            r.op = Op::Huber;
            r.a = x.id;
            r.b = anchor.id;
            r.c = curvature.id;
            r.out = v.id;
            r.d0 = cap;
            records_.push_back(r);
        }
        return v;
    }

    // ---- access ----

    const std::vector<double>& val(Var v) const { return node(v).val; }
    const std::vector<int>& shape(Var v) const { return node(v).shape; }
    bool tracked(Var v) const { return node(v).tracked; }

    double scalarVal(Var v) const {
        if (node(v).val.size() != 1) throw UsageError("scalarVal on non-scalar");
        return node(v).val[0];
    }

    size_t recordCount() const { return records_.size(); }

    // Reverse traversal. Populates grad buffers of all leaf tensors
    // (accumulating), raising ExplosionSignal with the offending leaf
    // name on any non-finite gradient.
    void backward(Var loss) {
        if (!loss.valid() || node(loss).val.size() != 1)
            throw UsageError("backward requires a scalar loss");
        if (!node(loss).tracked)
            throw UsageError("backward requires a loss reachable from tracked leaves");
        for (Node& n : nodes_) {
            if (n.tracked)
                n.grad.assign(n.val.size(), 0.0);
            else
                n.grad.clear();
        }
        nodes_[static_cast<size_t>(loss.id)].grad[0] = 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) applyBackward(*it);
        for (Node& n : nodes_) {
            if (!n.sink) continue;
            Tensor& t = *n.sink;
            t.ensureGrad();
            for (size_t i = 0; i < n.grad.size(); ++i) {
                const double g = n.grad[i];
                if (!std::isfinite(g))
                    throw ExplosionSignal(n.name.empty() ? "<unnamed leaf>" : n.name,
                                          "non-finite gradient");
                t.grad[i] += g;
            }
        }
    }

private:
    enum class Op : uint8_t {
        Relu,
        Sigmoid,
        LogSigmoid,
        Exp,
        Log,
        Add,
        Sub,
        Mul,
        Div,
        Min,
        Max,
        AddS,
        MulS,
        Sum,
        Slice,
        Conv2d,
        Huber,
        Clamp,
    };

    struct Node {
        std::vector<int> shape;
        std::vector<double> val;
        std::vector<double> grad;
        Tensor* sink = nullptr;
        std::string name;
        bool tracked = false;
    };

    struct Record {
        Op op;
        int a = -1;
        int b = -1;
        int c = -1;
        int out = -1;
        int64_t i0 = 0;
        int64_t i1 = 0;
        double d0 = 0.0;
        double d1 = 0.0;
    };

    std::vector<Node> nodes_;
    std::vector<Record> records_;

    Node& node(Var v) { return nodes_.at(static_cast<size_t>(v.id)); }
    const Node& node(Var v) const { return nodes_.at(static_cast<size_t>(v.id)); }

    Var pushNode(Node&& n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var pushNodeTracked(Node&& n, bool tracked) {
        n.tracked = tracked;
        return pushNode(std::move(n));
    }

    Var finishUnary(Op op, Var x, Node&& out, double d0 = 0.0) {
        Var v = pushNodeTracked(std::move(out), node(x).tracked);
        if (node(v).tracked) {
            Record r;
            r.op = op;
            r.a = x.id;
            r.out = v.id;
            r.d0 = d0;
            records_.push_back(r);
        }
        return v;
    }

    Var unary(Op op, Var x) {
        const Node& n = node(x);
        Node out;
        out.shape = n.shape;
        out.val.resize(n.val.size());
        switch (op) {
            case Op::Relu:
                for (size_t i = 0; i < n.val.size(); ++i) out.val[i] = n.val[i] > 0 ? n.val[i] : 0.0;
                break;
            case Op::Sigmoid:
                for (size_t i = 0; i < n.val.size(); ++i) out.val[i] = stableSigmoid(n.val[i]);
                break;
            case Op::LogSigmoid:
                for (size_t i = 0; i < n.val.size(); ++i) out.val[i] = logSigmoidScalar(n.val[i]);
                break;
            case Op::Exp:
                for (size_t i = 0; i < n.val.size(); ++i) out.val[i] = std::exp(n.val[i]);
                break;
            case Op::Log:
                for (size_t i = 0; i < n.val.size(); ++i) out.val[i] = std::log(n.val[i]);
                break;
            default:
                throw UsageError("unary dispatch");
        }
        return finishUnary(op, x, std::move(out));
    }

    static bool broadcastCompatible(size_t na, size_t nb) { return na == nb || na == 1 || nb == 1; }

    Var binary(Op op, Var a, Var b) {
        const Node& an = node(a);
        const Node& bn = node(b);
        const size_t na = an.val.size(), nb = bn.val.size();
        if (!broadcastCompatible(na, nb))
            throw ConfigError("elementwise operands must share shape or one must be scalar");
        const size_t n = std::max(na, nb);
        Node out;
        out.shape = na >= nb ? an.shape : bn.shape;
        out.val.resize(n);
        for (size_t i = 0; i < n; ++i) {
            const double x = an.val[na == 1 ? 0 : i];
            const double y = bn.val[nb == 1 ? 0 : i];
            switch (op) {
                case Op::Add: out.val[i] = x + y; break;
                case Op::Sub: out.val[i] = x - y; break;
                case Op::Mul: out.val[i] = x * y; break;
                case Op::Div: out.val[i] = x / y; break;
                case Op::Min: out.val[i] = x <= y ? x : y; break;
                case Op::Max: out.val[i] = x >= y ? x : y; break;
                default: throw UsageError("binary dispatch");
            }
        }
        Var v = pushNodeTracked(std::move(out), an.tracked || bn.tracked);
        if (node(v).tracked) {
            Record r;
            r.op = op;
            r.a = a.id;
            r.b = b.id;
            r.out = v.id;
            records_.push_back(r);
        }
        return v;
    }

    static double stableSigmoid(double x) {
        if (x >= 0) {
            const double e = std::exp(-x);
            return 1.0 / (1.0 + e);
        }
        const double e = std::exp(x);
        return e / (1.0 + e);
    }

    // log(sigmoid(x)) = -softplus(-x)
    static double logSigmoidScalar(double x) {
        if (x >= 0) return -std::log1p(std::exp(-x));
        return x - std::log1p(std::exp(x));
    }

    // Adds grad contribution into input node i (broadcast-aware).
    void accumulate(Node& in, size_t idx, double g) {
        if (in.val.size() == 1)
            in.grad[0] += g;
        else
            in.grad[idx] += g;
    }

    void applyBackward(const Record& r) {
        Node& out = nodes_[static_cast<size_t>(r.out)];
        switch (r.op) {
            case Op::Relu: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                for (size_t i = 0; i < out.grad.size(); ++i)
                    if (a.val[i] > 0) a.grad[i] += out.grad[i];
                break;
            }
            case Op::Sigmoid: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                for (size_t i = 0; i < out.grad.size(); ++i) {
                    const double s = out.val[i];
                    a.grad[i] += out.grad[i] * s * (1.0 - s);
                }
                break;
            }
            case Op::LogSigmoid: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                for (size_t i = 0; i < out.grad.size(); ++i)
                    a.grad[i] += out.grad[i] * stableSigmoid(-a.val[i]);
                break;
            }
            case Op::Exp: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                for (size_t i = 0; i < out.grad.size(); ++i) a.grad[i] += out.grad[i] * out.val[i];
                break;
            }
            case Op::Log: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                for (size_t i = 0; i < out.grad.size(); ++i) a.grad[i] += out.grad[i] / a.val[i];
                break;
            }
            case Op::Add: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                Node& b = nodes_[static_cast<size_t>(r.b)];
                for (size_t i = 0; i < out.grad.size(); ++i) {
                    if (a.tracked) accumulate(a, i, out.grad[i]);
                    if (b.tracked) accumulate(b, i, out.grad[i]);
                }
                break;
            }
            case Op::Sub: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                Node& b = nodes_[static_cast<size_t>(r.b)];
                for (size_t i = 0; i < out.grad.size(); ++i) {
                    if (a.tracked) accumulate(a, i, out.grad[i]);
                    if (b.tracked) accumulate(b, i, -out.grad[i]);
                }
                break;
            }
            case Op::Mul: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                Node& b = nodes_[static_cast<size_t>(r.b)];
                const size_t na = a.val.size(), nb = b.val.size();
                for (size_t i = 0; i < out.grad.size(); ++i) {
                    const double x = a.val[na == 1 ? 0 : i];
                    const double y = b.val[nb == 1 ? 0 : i];
                    if (a.tracked) accumulate(a, i, out.grad[i] * y);
                    if (b.tracked) accumulate(b, i, out.grad[i] * x);
                }
                break;
            }
            case Op::Div: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                Node& b = nodes_[static_cast<size_t>(r.b)];
                const size_t na = a.val.size(), nb = b.val.size();
                for (size_t i = 0; i < out.grad.size(); ++i) {
                    const double x = a.val[na == 1 ? 0 : i];
                    const double y = b.val[nb == 1 ? 0 : i];
                    if (a.tracked) accumulate(a, i, out.grad[i] / y);
                    if (b.tracked) accumulate(b, i, -out.grad[i] * x / (y * y));
                }
                break;
            }
            case Op::Min: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                Node& b = nodes_[static_cast<size_t>(r.b)];
                const size_t na = a.val.size(), nb = b.val.size();
                for (size_t i = 0; i < out.grad.size(); ++i) {
                    const double x = a.val[na == 1 ? 0 : i];
                    const double y = b.val[nb == 1 ? 0 : i];
                    if (x <= y) {
                        if (a.tracked) accumulate(a, i, out.grad[i]);
                    } else if (b.tracked) {
                        accumulate(b, i, out.grad[i]);
                    }
                }
                break;
            }
            case Op::Max: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                Node& b = nodes_[static_cast<size_t>(r.b)];
                const size_t na = a.val.size(), nb = b.val.size();
                for (size_t i = 0; i < out.grad.size(); ++i) {
                    const double x = a.val[na == 1 ? 0 : i];
                    const double y = b.val[nb == 1 ? 0 : i];
                    if (x >= y) {
                        if (a.tracked) accumulate(a, i, out.grad[i]);
                    } else if (b.tracked) {
                        accumulate(b, i, out.grad[i]);
                    }
                }
                break;
            }
            case Op::AddS: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                for (size_t i = 0; i < out.grad.size(); ++i) a.grad[i] += out.grad[i];
                break;
            }
            case Op::MulS: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                for (size_t i = 0; i < out.grad.size(); ++i) a.grad[i] += out.grad[i] * r.d0;
                break;
            }
            case Op::Sum: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                const double g = out.grad[0];
                for (size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += g;
                break;
            }
            case Op::Slice: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                const size_t off = static_cast<size_t>(r.i0);
                for (size_t i = 0; i < out.grad.size(); ++i) a.grad[off + i] += out.grad[i];
                break;
            }
            case Op::Conv2d: {
                Node& in = nodes_[static_cast<size_t>(r.a)];
                Node& w = nodes_[static_cast<size_t>(r.b)];
                Node& bias = nodes_[static_cast<size_t>(r.c)];
                convBackward(in, w, bias, out, static_cast<int>(r.i0), static_cast<int>(r.i1));
                break;
            }
            case Op::Clamp: {
                Node& a = nodes_[static_cast<size_t>(r.a)];
                for (size_t i = 0; i < out.grad.size(); ++i)
                    if (a.val[i] > r.d0 && a.val[i] < r.d1) a.grad[i] += out.grad[i];
                break;
            }
            case Op::Huber: {
                Node& x = nodes_[static_cast<size_t>(r.a)];
                const Node& anchor = nodes_[static_cast<size_t>(r.b)];
                const Node& curv = nodes_[static_cast<size_t>(r.c)];
                const double g = out.grad[0];
                const double cap = r.d0;
                for (size_t i = 0; i < x.val.size(); ++i) {
                    const double d = x.val[i] - anchor.val[i];
                    double slope = curv.val[i] * d;
                    if (slope > cap) slope = cap;
                    if (slope < -cap) slope = -cap;
                    x.grad[i] += g * slope;
                }
                break;
            }
        }
    }

    static void convForward(const double* in, const double* w, const double* bias, double* out,
                            int N, int Cin, int H, int W, int Cout, int kH, int kW, int stride,
                            int padding, int Ho, int Wo) {
        for (int n = 0; n < N; ++n) {
            for (int co = 0; co < Cout; ++co) {
                double* outPlane = out + (static_cast<size_t>(n) * Cout + co) * Ho * Wo;
                const double bv = bias[co];
                for (int i = 0; i < Ho * Wo; ++i) outPlane[i] = bv;
                for (int ci = 0; ci < Cin; ++ci) {
                    const double* inPlane = in + (static_cast<size_t>(n) * Cin + ci) * H * W;
                    const double* wk = w + (static_cast<size_t>(co) * Cin + ci) * kH * kW;
                    for (int kh = 0; kh < kH; ++kh) {
                        for (int kw = 0; kw < kW; ++kw) {
                            const double wv = wk[kh * kW + kw];
                            if (wv == 0.0) continue;
                            int ilo, ihi, jlo, jhi;
                            tapRange(Ho, H, stride, padding, kh, ilo, ihi);
                            tapRange(Wo, W, stride, padding, kw, jlo, jhi);
                            for (int i = ilo; i <= ihi; ++i) {
                                const double* irow = inPlane + (i * stride - padding + kh) * W;
                                double* orow = outPlane + i * Wo;
                                const int base = -padding + kw;
                                if (stride == 1) {
                                    for (int j = jlo; j <= jhi; ++j) orow[j] += wv * irow[j + base];
                                } else {
                                    for (int j = jlo; j <= jhi; ++j)
                                        orow[j] += wv * irow[j * stride + base];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    void convBackward(Node& in, Node& w, Node& bias, const Node& out, int stride, int padding) {
        const int N = in.shape[0], Cin = in.shape[1], H = in.shape[2], W = in.shape[3];
        const int Cout = w.shape[0], kH = w.shape[2], kW = w.shape[3];
        const int Ho = out.shape[2], Wo = out.shape[3];
        for (int n = 0; n < N; ++n) {
            for (int co = 0; co < Cout; ++co) {
                const double* go = out.grad.data() + (static_cast<size_t>(n) * Cout + co) * Ho * Wo;
                if (bias.tracked) {
                    double acc = 0.0;
                    for (int i = 0; i < Ho * Wo; ++i) acc += go[i];
                    bias.grad[co] += acc;
                }
                for (int ci = 0; ci < Cin; ++ci) {
                    const double* inPlane =
                        in.val.data() + (static_cast<size_t>(n) * Cin + ci) * H * W;
                    double* dinPlane =
                        in.tracked ? in.grad.data() + (static_cast<size_t>(n) * Cin + ci) * H * W
                                   : nullptr;
                    const double* wk = w.val.data() + (static_cast<size_t>(co) * Cin + ci) * kH * kW;
                    double* dwk =
                        w.tracked ? w.grad.data() + (static_cast<size_t>(co) * Cin + ci) * kH * kW
                                  : nullptr;
                    for (int kh = 0; kh < kH; ++kh) {
                        for (int kw = 0; kw < kW; ++kw) {
                            int ilo, ihi, jlo, jhi;
                            tapRange(Ho, H, stride, padding, kh, ilo, ihi);
                            tapRange(Wo, W, stride, padding, kw, jlo, jhi);
                            const int base = -padding + kw;
                            if (w.tracked) {
                                double acc = 0.0;
                                for (int i = ilo; i <= ihi; ++i) {
                                    const double* irow = inPlane + (i * stride - padding + kh) * W;
                                    const double* grow = go + i * Wo;
                                    for (int j = jlo; j <= jhi; ++j)
                                        acc += grow[j] * irow[j * stride + base];
                                }
                                dwk[kh * kW + kw] += acc;
                            }
                            if (in.tracked) {
                                const double wv = wk[kh * kW + kw];
                                for (int i = ilo; i <= ihi; ++i) {
                                    double* drow = dinPlane + (i * stride - padding + kh) * W;
                                    const double* grow = go + i * Wo;
                                    for (int j = jlo; j <= jhi; ++j)
                                        drow[j * stride + base] += wv * grow[j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // Output index range [lo, hi] for which the input tap
    // i*stride - padding + k stays within [0, extent).
    static void tapRange(int outExtent, int inExtent, int stride, int padding, int k, int& lo,
                         int& hi) {
        lo = 0;
        while (lo < outExtent && lo * stride - padding + k < 0) ++lo;
        hi = outExtent - 1;
        while (hi >= 0 && hi * stride - padding + k >= inExtent) --hi;
    }
};

// Compares the reverse-mode gradient of f against central finite
// differences, coordinate by coordinate. Returns the maximum relative
// error with denominator max(|a|,|b|,1e-8); non-finite comparisons
// yield +infinity.
inline double gradCheck(const std::function<Tape::Var(Tape&, Tape::Var)>& f, const Tensor& x,
                        double eps) {
    if (eps <= 0) throw UsageError("gradCheck eps must be positive");

    Tensor probe = x;
    probe.grad.clear();
    Tape tape;
    Tape::Var xv = tape.leaf(probe, "gradcheck.x");
    Tape::Var y = f(tape, xv);
    tape.backward(y);

    const auto evalAt = [&](const Tensor& point) {
        Tape t;
        Tensor local = point;
        Tape::Var lv = t.leaf(local, "gradcheck.probe");
        return t.scalarVal(f(t, lv));
    };

    double maxErr = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        Tensor hi = x;
        Tensor lo = x;
        hi.data[i] += eps;
        lo.data[i] -= eps;
        const double numeric = (evalAt(hi) - evalAt(lo)) / (2.0 * eps);
        const double analytic = probe.grad[i];
        if (!std::isfinite(numeric) || !std::isfinite(analytic))
            return std::numeric_limits<double>::infinity();
        const double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-8});
        maxErr = std::max(maxErr, std::fabs(numeric - analytic) / denom);
    }
    return maxErr;
}

}  // namespace diode
