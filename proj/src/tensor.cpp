#include "hqdet/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace hqdet {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

thread_local Tape* g_active_tape = nullptr;

NodePtr new_node(Shape shape, std::vector<double> values) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return n;
}

// Builds the output node and, when recording, wires the backward closure.
Tensor emit(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
            std::function<void(Node&)> backward_fn) {
    auto out = new_node(std::move(shape), std::move(values));
    Tape* tape = g_active_tape;
    if (tape != nullptr) {
        bool any = false;
        for (const Tensor* t : inputs) any = any || t->requires_grad();
        if (any) {
            out->requires_grad = true;
            for (const Tensor* t : inputs) out->parents.push_back(t->handle());
            out->backward_fn = std::move(backward_fn);
            tape->record(out);
        }
    }
    return Tensor(out);
}

Tensor emit_many(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                 std::function<void(Node&)> backward_fn) {
    auto out = new_node(std::move(shape), std::move(values));
    Tape* tape = g_active_tape;
    if (tape != nullptr) {
        bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
        if (any) {
            out->requires_grad = true;
            for (const Tensor& t : inputs) out->parents.push_back(t.handle());
            out->backward_fn = std::move(backward_fn);
            tape->record(out);
        }
    }
    return Tensor(out);
}

// Gradient buffer of parent `i`, or nullptr when it does not take gradients.
double* pgrad(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    if (!p.requires_grad) return nullptr;
    p.ensure_grad();
    return p.grad.data();
}

void require(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

std::size_t last_dim(const Tensor& x) { return x.shape().back(); }

Tensor unary(const Tensor& x, double (*f)(double), double (*df)(double x, double y)) {
    std::vector<double> out(x.numel());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    return emit(x.shape(), std::move(out), {&x}, [df](Node& self) {
        double* g = pgrad(self, 0);
        if (!g) return;
        const auto& xin = self.parents[0]->value;
        for (std::size_t i = 0; i < self.value.size(); ++i) g[i] += self.grad[i] * df(xin[i], self.value[i]);
    });
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid_scalar(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// ------------------------------------------------------------------ plumbing

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                             " values");
    }
    node_ = new_node(std::move(shape), std::move(values));
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::dim(std::size_t i) const { return node_->shape.at(i); }
std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::values_mut() { return node_->value; }

double Tensor::at(std::size_t i) const { return node_->value.at(i); }
double Tensor::at(std::size_t i, std::size_t j) const { return node_->value.at(i * node_->shape.at(1) + j); }
double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
    return node_->value.at((i * node_->shape.at(1) + j) * node_->shape.at(2) + k);
}

double Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::grad_mut() {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

void Tape::record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw UsageError("backward: loss must be a scalar, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (!std::isfinite(loss.item())) throw UsageError("backward: loss is not finite");
    Node& root = *loss.handle();
    root.ensure_grad();
    root.grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (n.grad.empty() || !n.backward_fn) continue;
        n.backward_fn(n);
    }
}

TapeScope::TapeScope(Tape* tape) : previous_(g_active_tape) { g_active_tape = tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }
Tape* active_tape() { return g_active_tape; }

// ---------------------------------------------------------------- arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return emit(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (double* g = pgrad(self, p))
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return emit(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (double* g = pgrad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return emit(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
        if (double* g = pgrad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    });
}

Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.values().begin(), x.values().end());
    for (double& v : out) v *= s;
    return emit(x.shape(), std::move(out), {&x}, [s](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
    });
}

Tensor add_scalar(const Tensor& x, double s) {
    std::vector<double> out(x.values().begin(), x.values().end());
    for (double& v : out) v += s;
    return emit(x.shape(), std::move(out), {&x}, [](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
    require(row.rank() == 1 && x.rank() >= 1 && last_dim(x) == row.dim(0),
            "add_row: " + shape_str(x.shape()) + " vs " + shape_str(row.shape()));
    const std::size_t d = row.dim(0);
    std::vector<double> out(x.values().begin(), x.values().end());
    auto rv = row.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += rv[i % d];
    return emit(x.shape(), std::move(out), {&x, &row}, [d](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (double* g = pgrad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
    });
}

Tensor relu(const Tensor& x) {
    return unary(
        x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c = 0.044715;
    return unary(
        x,
        [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
        [](double v, double) {
            double t = std::tanh(k * (v + c * v * v * v));
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * c * v * v);
        });
}

Tensor sigmoid(const Tensor& x) {
    return unary(x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
    return unary(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
    return unary(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor sum(const Tensor& x) {
    auto v = x.values();
    double s = std::accumulate(v.begin(), v.end(), 0.0);
    return emit({}, {s}, {&x}, [](Node& self) {
        if (double* g = pgrad(self, 0)) {
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ------------------------------------------------------------ linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() >= 2 && b.rank() >= 2,
            "matmul: operands must be at least 2-D, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t p = a.dim(a.rank() - 2), q = a.dim(a.rank() - 1);
    const std::size_t q2 = b.dim(b.rank() - 2), r = b.dim(b.rank() - 1);
    Shape lead_a(a.shape().begin(), a.shape().end() - 2);
    Shape lead_b(b.shape().begin(), b.shape().end() - 2);
    if (q != q2 || !(lead_a == lead_b || lead_a.empty() || lead_b.empty())) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const Shape& lead = lead_a.empty() ? lead_b : lead_a;
    const std::size_t batch = shape_numel(lead);
    const bool a_shared = lead_a.empty() && !lead_b.empty();
    const bool b_shared = lead_b.empty() && !lead_a.empty();
    Shape out_shape = lead;
    out_shape.push_back(p);
    out_shape.push_back(r);
    std::vector<double> out(batch * p * r);
    auto av = a.values(), bv = b.values();
    for (std::size_t t = 0; t < batch; ++t) {
        CMapR A(av.data() + (a_shared ? 0 : t * p * q), p, q);
        CMapR B(bv.data() + (b_shared ? 0 : t * q * r), q, r);
        MapR C(out.data() + t * p * r, p, r);
        C.noalias() = A * B;
    }
    return emit(std::move(out_shape), std::move(out), {&a, &b}, [=](Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        double* ga = pgrad(self, 0);
        double* gb = pgrad(self, 1);
        for (std::size_t t = 0; t < batch; ++t) {
            CMapR G(self.grad.data() + t * p * r, p, r);
            if (ga) {
                MapR GA(ga + (a_shared ? 0 : t * p * q), p, q);
                CMapR B(bv.data() + (b_shared ? 0 : t * q * r), q, r);
                GA.noalias() += G * B.transpose();
            }
            if (gb) {
                MapR GB(gb + (b_shared ? 0 : t * q * r), q, r);
                CMapR A(av.data() + (a_shared ? 0 : t * p * q), p, q);
                GB.noalias() += A.transpose() * G;
            }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require(weight.rank() == 2 && x.rank() >= 1 && last_dim(x) == weight.dim(0),
            "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    const std::size_t din = weight.dim(0), dout = weight.dim(1);
    if (bias.defined()) {
        require(bias.rank() == 1 && bias.dim(0) == dout,
                "linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    const std::size_t rows = x.numel() / din;
    Shape out_shape = x.shape();
    out_shape.back() = dout;
    std::vector<double> out(rows * dout);
    {
        CMapR X(x.values().data(), rows, din);
        CMapR W(weight.values().data(), din, dout);
        MapR Y(out.data(), rows, dout);
        Y.noalias() = X * W;
        if (bias.defined()) {
            Eigen::Map<const Eigen::RowVectorXd> bv(bias.values().data(), dout);
            Y.rowwise() += bv;
        }
    }
    Tensor b = bias.defined() ? bias : Tensor::zeros({dout});
    return emit(std::move(out_shape), std::move(out), {&x, &weight, &b}, [=](Node& self) {
        CMapR G(self.grad.data(), rows, dout);
        if (double* gx = pgrad(self, 0)) {
            CMapR W(self.parents[1]->value.data(), din, dout);
            MapR GX(gx, rows, din);
            GX.noalias() += G * W.transpose();
        }
        if (double* gw = pgrad(self, 1)) {
            CMapR X(self.parents[0]->value.data(), rows, din);
            MapR GW(gw, din, dout);
            GW.noalias() += X.transpose() * G;
        }
        if (double* gb = pgrad(self, 2)) {
            Eigen::Map<Eigen::RowVectorXd> GB(gb, dout);
            GB += G.colwise().sum();
        }
    });
}

Tensor transpose(const Tensor& x) {
    require(x.rank() >= 2, "transpose: need rank >= 2, got " + shape_str(x.shape()));
    const std::size_t p = x.dim(x.rank() - 2), q = x.dim(x.rank() - 1);
    const std::size_t batch = x.numel() / (p * q);
    Shape out_shape = x.shape();
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    std::vector<double> out(x.numel());
    auto xv = x.values();
    for (std::size_t t = 0; t < batch; ++t)
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) out[t * p * q + j * p + i] = xv[t * p * q + i * q + j];
    return emit(std::move(out_shape), std::move(out), {&x}, [=](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t t = 0; t < batch; ++t)
                for (std::size_t i = 0; i < p; ++i)
                    for (std::size_t j = 0; j < q; ++j) g[t * p * q + i * q + j] += self.grad[t * p * q + j * p + i];
    });
}

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
    require(logits.rank() >= 1, "masked_softmax: scalar input");
    const std::size_t n = last_dim(logits);
    const std::size_t mask_n = mask.defined() ? mask.numel() : 0;
    if (mask.defined()) {
        const Shape& ls = logits.shape();
        const Shape& ms = mask.shape();
        bool ok = ms.size() <= ls.size() && !ms.empty() && std::equal(ms.rbegin(), ms.rend(), ls.rbegin());
        require(ok, "masked_softmax: mask " + shape_str(ms) + " does not trail logits " + shape_str(ls));
    }
    std::vector<double> out(logits.numel(), 0.0);
    auto lv = logits.values();
    auto mv = mask.defined() ? mask.values() : std::span<const double>{};
    const std::size_t rows = n ? logits.numel() / n : 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = lv.data() + r * n;
        double* y = out.data() + r * n;
        const double* m = mask_n ? mv.data() + (r * n) % mask_n : nullptr;
        // A NaN logit makes the max NaN so the row propagates NaN instead of
        // looking fully masked.
        double mx = -std::numeric_limits<double>::infinity();
        bool open = false;
        for (std::size_t j = 0; j < n; ++j) {
            double add = m ? m[j] : 0.0;
            if (add == -std::numeric_limits<double>::infinity()) continue;
            open = true;
            const double v = x[j] + add;
            if (v > mx || std::isnan(v)) mx = v;
        }
        if (!open) {
            throw ContractError("masked_softmax: row " + std::to_string(r) + " is fully masked");
        }
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double add = m ? m[j] : 0.0;
            if (add == -std::numeric_limits<double>::infinity()) continue;
            y[j] = std::exp(x[j] + add - mx);
            s += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= s;
    }
    return emit(logits.shape(), std::move(out), {&logits}, [n, rows](Node& self) {
        double* g = pgrad(self, 0);
        if (!g) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * n;
            const double* dy = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
        }
    });
}

Tensor softmax(const Tensor& logits) { return masked_softmax(logits, Tensor()); }

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = last_dim(x);
    require(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
            "layer_norm: input " + shape_str(x.shape()) + " vs gamma " + shape_str(gamma.shape()) + " beta " +
                shape_str(beta.shape()));
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    auto xv = x.values(), gv = gamma.values(), bv = beta.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
            out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
        }
    }
    return emit(x.shape(), std::move(out), {&x, &gamma, &beta},
                [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                    const auto& gv = self.parents[1]->value;
                    double* gx = pgrad(self, 0);
                    double* gg = pgrad(self, 1);
                    double* gb = pgrad(self, 2);
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* dy = self.grad.data() + r * d;
                        const double* xh = xhat.data() + r * d;
                        if (gg)
                            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * xh[j];
                        if (gb)
                            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[j];
                        if (gx) {
                            double s1 = 0.0, s2 = 0.0;
                            for (std::size_t j = 0; j < d; ++j) {
                                double dxh = dy[j] * gv[j];
                                s1 += dxh;
                                s2 += dxh * xh[j];
                            }
                            const double inv_d = 1.0 / static_cast<double>(d);
                            for (std::size_t j = 0; j < d; ++j) {
                                double dxh = dy[j] * gv[j];
                                gx[r * d + j] += inv_std[r] * (dxh - inv_d * s1 - xh[j] * inv_d * s2);
                            }
                        }
                    }
                });
}

// ----------------------------------------------------------------- reshaping

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return emit(std::move(shape), std::move(out), {&x}, [](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
    require(x.rank() == 2 && heads > 0 && x.dim(1) % heads == 0,
            "split_heads: " + shape_str(x.shape()) + " into " + std::to_string(heads) + " heads");
    const std::size_t n = x.dim(0), c = x.dim(1), d = c / heads;
    std::vector<double> out(x.numel());
    auto xv = x.values();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t h = 0; h < heads; ++h)
            std::copy_n(xv.data() + i * c + h * d, d, out.data() + (h * n + i) * d);
    return emit({heads, n, d}, std::move(out), {&x}, [=](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t k = 0; k < d; ++k) g[i * c + h * d + k] += self.grad[(h * n + i) * d + k];
    });
}

Tensor merge_heads(const Tensor& x) {
    require(x.rank() == 3, "merge_heads: need [h, n, d], got " + shape_str(x.shape()));
    const std::size_t heads = x.dim(0), n = x.dim(1), d = x.dim(2), c = heads * d;
    std::vector<double> out(x.numel());
    auto xv = x.values();
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i) std::copy_n(xv.data() + (h * n + i) * d, d, out.data() + i * c + h * d);
    return emit({n, c}, std::move(out), {&x}, [=](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t k = 0; k < d; ++k) g[(h * n + i) * d + k] += self.grad[i * c + h * d + k];
    });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    require(x.rank() == 2 && begin <= end && end <= x.dim(1),
            "slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), c = x.dim(1), w = end - begin;
    std::vector<double> out(rows * w);
    auto xv = x.values();
    for (std::size_t i = 0; i < rows; ++i) std::copy_n(xv.data() + i * c + begin, w, out.data() + i * w);
    return emit({rows, w}, std::move(out), {&x}, [=](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t k = 0; k < w; ++k) g[i * c + begin + k] += self.grad[i * w + k];
    });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    require(x.rank() >= 1 && begin <= end && end <= x.dim(0),
            "slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(x.shape()));
    const std::size_t stride = x.dim(0) ? x.numel() / x.dim(0) : 0;
    Shape out_shape = x.shape();
    out_shape[0] = end - begin;
    std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                            x.values().begin() + static_cast<std::ptrdiff_t>(end * stride));
    return emit(std::move(out_shape), std::move(out), {&x}, [=](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * stride + i] += self.grad[i];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const Tensor& t : parts) {
        require(t.rank() == 2 && t.dim(0) == rows,
                "concat_cols: " + shape_str(t.shape()) + " vs rows " + std::to_string(rows));
        widths.push_back(t.dim(1));
        total += t.dim(1);
    }
    std::vector<double> out(rows * total);
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        auto v = parts[p].values();
        for (std::size_t i = 0; i < rows; ++i) std::copy_n(v.data() + i * widths[p], widths[p], out.data() + i * total + off);
        off += widths[p];
    }
    return emit_many({rows, total}, std::move(out), parts, [rows, total, widths](Node& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
            if (double* g = pgrad(self, p))
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t k = 0; k < widths[p]; ++k) g[i * widths[p] + k] += self.grad[i * total + off + k];
            off += widths[p];
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t rows = 0;
    std::vector<std::size_t> sizes;
    for (const Tensor& t : parts) {
        Shape t_tail(t.shape().begin() + 1, t.shape().end());
        require(t.rank() >= 1 && t_tail == tail, "concat_rows: " + shape_str(t.shape()) + " vs " + shape_str(parts[0].shape()));
        rows += t.dim(0);
        sizes.push_back(t.numel());
    }
    std::vector<double> out;
    out.reserve(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
    for (const Tensor& t : parts) out.insert(out.end(), t.values().begin(), t.values().end());
    Shape out_shape{rows};
    out_shape.insert(out_shape.end(), tail.begin(), tail.end());
    return emit_many(std::move(out_shape), std::move(out), parts, [sizes](Node& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < sizes.size(); ++p) {
            if (double* g = pgrad(self, p))
                for (std::size_t i = 0; i < sizes[p]; ++i) g[i] += self.grad[off + i];
            off += sizes[p];
        }
    });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
    require(x.rank() == 2, "gather_rows: need 2-D input, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<std::size_t> idx(index.begin(), index.end());
    std::vector<double> out(idx.size() * c);
    auto xv = x.values();
    for (std::size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] >= n) throw DimensionError("gather_rows: index " + std::to_string(idx[j]) + " out of " + std::to_string(n));
        std::copy_n(xv.data() + idx[j] * c, c, out.data() + j * c);
    }
    return emit({idx.size(), c}, std::move(out), {&x}, [idx, c](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t j = 0; j < idx.size(); ++j)
                for (std::size_t k = 0; k < c; ++k) g[idx[j] * c + k] += self.grad[j * c + k];
    });
}

Tensor segment_sum_rows(const Tensor& x, std::span<const std::size_t> owner, std::size_t num_segments) {
    require(x.rank() == 2 && x.dim(0) == owner.size(),
            "segment_sum_rows: " + shape_str(x.shape()) + " vs " + std::to_string(owner.size()) + " owners");
    const std::size_t c = x.dim(1);
    std::vector<std::size_t> own(owner.begin(), owner.end());
    std::vector<double> out(num_segments * c, 0.0);
    auto xv = x.values();
    for (std::size_t j = 0; j < own.size(); ++j) {
        if (own[j] >= num_segments) throw DimensionError("segment_sum_rows: owner " + std::to_string(own[j]) + " out of range");
        for (std::size_t k = 0; k < c; ++k) out[own[j] * c + k] += xv[j * c + k];
    }
    return emit({num_segments, c}, std::move(out), {&x}, [own, c](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t j = 0; j < own.size(); ++j)
                for (std::size_t k = 0; k < c; ++k) g[j * c + k] += self.grad[own[j] * c + k];
    });
}

Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> owner, std::size_t num_segments) {
    require(x.rank() == 2 && x.dim(0) == owner.size(),
            "segment_mean_rows: " + shape_str(x.shape()) + " vs " + std::to_string(owner.size()) + " owners");
    const std::size_t c = x.dim(1);
    std::vector<std::size_t> own(owner.begin(), owner.end());
    std::vector<double> count(num_segments, 0.0);
    for (std::size_t o : own) {
        if (o >= num_segments) throw DimensionError("segment_mean_rows: owner " + std::to_string(o) + " out of range");
        count[o] += 1.0;
    }
    std::vector<double> out(num_segments * c, 0.0);
    auto xv = x.values();
    for (std::size_t j = 0; j < own.size(); ++j)
        for (std::size_t k = 0; k < c; ++k) out[own[j] * c + k] += xv[j * c + k];
    for (std::size_t i = 0; i < num_segments; ++i)
        if (count[i] > 0)
            for (std::size_t k = 0; k < c; ++k) out[i * c + k] /= count[i];
    return emit({num_segments, c}, std::move(out), {&x}, [own, count, c](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t j = 0; j < own.size(); ++j)
                for (std::size_t k = 0; k < c; ++k) g[j * c + k] += self.grad[own[j] * c + k] / count[own[j]];
    });
}

// ------------------------------------------------------------------ sampling

Tensor bilinear_sample(const Tensor& featmap, const Tensor& points) {
    require(featmap.rank() == 3, "bilinear_sample: featmap must be [H,W,C], got " + shape_str(featmap.shape()));
    require(points.rank() == 2 && points.dim(1) == 2,
            "bilinear_sample: points must be [P,2], got " + shape_str(points.shape()));
    const std::size_t H = featmap.dim(0), W = featmap.dim(1), C = featmap.dim(2), P = points.dim(0);
    auto fv = featmap.values();
    auto pv = points.values();
    std::vector<double> out(P * C, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
        const double u = pv[2 * p], v = pv[2 * p + 1];
        if (!std::isfinite(u) || !std::isfinite(v)) throw ContractError("bilinear_sample: non-finite sample point");
        const double x0f = std::floor(u), y0f = std::floor(v);
        const double fx = u - x0f, fy = v - y0f;
        const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
        const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
        const long cx[4] = {x0, x0 + 1, x0, x0 + 1};
        const long cy[4] = {y0, y0, y0 + 1, y0 + 1};
        for (int k = 0; k < 4; ++k) {
            if (cx[k] < 0 || cy[k] < 0 || cx[k] >= static_cast<long>(W) || cy[k] >= static_cast<long>(H)) continue;
            const double* f = fv.data() + (static_cast<std::size_t>(cy[k]) * W + static_cast<std::size_t>(cx[k])) * C;
            for (std::size_t c = 0; c < C; ++c) out[p * C + c] += w[k] * f[c];
        }
    }
    return emit({P, C}, std::move(out), {&featmap, &points}, [=](Node& self) {
        const auto& fv = self.parents[0]->value;
        const auto& pv = self.parents[1]->value;
        double* gf = pgrad(self, 0);
        double* gp = pgrad(self, 1);
        for (std::size_t p = 0; p < P; ++p) {
            const double u = pv[2 * p], v = pv[2 * p + 1];
            const double x0f = std::floor(u), y0f = std::floor(v);
            const double fx = u - x0f, fy = v - y0f;
            const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
            const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
            const double dwx[4] = {-(1 - fy), (1 - fy), -fy, fy};
            const double dwy[4] = {-(1 - fx), -fx, (1 - fx), fx};
            const long cx[4] = {x0, x0 + 1, x0, x0 + 1};
            const long cy[4] = {y0, y0, y0 + 1, y0 + 1};
            const double* dy = self.grad.data() + p * C;
            for (int k = 0; k < 4; ++k) {
                if (cx[k] < 0 || cy[k] < 0 || cx[k] >= static_cast<long>(W) || cy[k] >= static_cast<long>(H)) continue;
                const std::size_t base = (static_cast<std::size_t>(cy[k]) * W + static_cast<std::size_t>(cx[k])) * C;
                if (gf)
                    for (std::size_t c = 0; c < C; ++c) gf[base + c] += w[k] * dy[c];
                if (gp) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < C; ++c) dot += fv[base + c] * dy[c];
                    gp[2 * p] += dwx[k] * dot;
                    gp[2 * p + 1] += dwy[k] * dot;
                }
            }
        }
    });
}

Tensor deform_combine(const Tensor& sampled, const Tensor& weights, std::size_t heads) {
    require(weights.rank() == 2 && heads > 0 && weights.dim(1) % heads == 0,
            "deform_combine: weights " + shape_str(weights.shape()) + " with " + std::to_string(heads) + " heads");
    const std::size_t Q = weights.dim(0), HP = weights.dim(1), P = HP / heads;
    require(sampled.rank() == 2 && sampled.dim(0) == Q * HP && sampled.dim(1) % heads == 0,
            "deform_combine: sampled " + shape_str(sampled.shape()) + " vs weights " + shape_str(weights.shape()));
    const std::size_t C = sampled.dim(1), d = C / heads;
    std::vector<double> out(Q * C, 0.0);
    auto sv = sampled.values(), wv = weights.values();
    for (std::size_t q = 0; q < Q; ++q)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t p = 0; p < P; ++p) {
                const double w = wv[q * HP + h * P + p];
                const double* s = sv.data() + ((q * heads + h) * P + p) * C + h * d;
                double* o = out.data() + q * C + h * d;
                for (std::size_t k = 0; k < d; ++k) o[k] += w * s[k];
            }
    return emit({Q, C}, std::move(out), {&sampled, &weights}, [=](Node& self) {
        const auto& sv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        double* gs = pgrad(self, 0);
        double* gw = pgrad(self, 1);
        for (std::size_t q = 0; q < Q; ++q)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t p = 0; p < P; ++p) {
                    const std::size_t row = ((q * heads + h) * P + p) * C + h * d;
                    const double* dy = self.grad.data() + q * C + h * d;
                    if (gs) {
                        const double w = wv[q * HP + h * P + p];
                        for (std::size_t k = 0; k < d; ++k) gs[row + k] += w * dy[k];
                    }
                    if (gw) {
                        double dot = 0.0;
                        for (std::size_t k = 0; k < d; ++k) dot += sv[row + k] * dy[k];
                        gw[q * HP + h * P + p] += dot;
                    }
                }
    });
}

// -------------------------------------------------------------------- losses

Tensor sigmoid_focal_loss(const Tensor& logits, std::span<const int> target, double alpha, double gamma) {
    require(logits.rank() == 2 && logits.dim(0) == target.size(),
            "sigmoid_focal_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(target.size()) +
                " targets");
    const std::size_t K = logits.dim(0), C = logits.dim(1);
    std::vector<int> tgt(target.begin(), target.end());
    auto xv = logits.values();
    double total = 0.0;
    std::vector<double> dldx(K * C);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < C; ++c) {
            const double x = xv[k * C + c];
            const double p = sigmoid_scalar(x);
            const double log_p = -softplus(-x);
            const double log_q = -softplus(x);
            if (tgt[k] == static_cast<int>(c)) {
                const double q = 1.0 - p;
                total += -alpha * std::pow(q, gamma) * log_p;
                dldx[k * C + c] = alpha * std::pow(q, gamma) * (gamma * p * log_p - q);
            } else {
                total += -(1.0 - alpha) * std::pow(p, gamma) * log_q;
                dldx[k * C + c] = -(1.0 - alpha) * std::pow(p, gamma) * (gamma * (1.0 - p) * log_q - p);
            }
        }
    return emit({}, {total}, {&logits}, [dldx = std::move(dldx)](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < dldx.size(); ++i) g[i] += self.grad[0] * dldx[i];
    });
}

Tensor weighted_l1(const Tensor& pred, std::span<const double> target, std::span<const double> col_weights) {
    require(pred.rank() == 2 && target.size() == pred.numel() && col_weights.size() == pred.dim(1),
            "weighted_l1: pred " + shape_str(pred.shape()) + " vs " + std::to_string(target.size()) + " targets, " +
                std::to_string(col_weights.size()) + " weights");
    const std::size_t D = pred.dim(1);
    auto pv = pred.values();
    std::vector<double> dl(pv.size());
    double total = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double r = pv[i] - target[i];
        const double w = col_weights[i % D];
        total += w * std::abs(r);
        dl[i] = r > 0 ? w : (r < 0 ? -w : 0.0);
    }
    return emit({}, {total}, {&pred}, [dl = std::move(dl)](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < dl.size(); ++i) g[i] += self.grad[0] * dl[i];
    });
}

Tensor giou_loss(const Tensor& pred, std::span<const double> target) {
    require(pred.rank() == 2 && pred.dim(1) == 4 && target.size() == pred.numel(),
            "giou_loss: pred " + shape_str(pred.shape()) + " vs " + std::to_string(target.size()) + " target values");
    constexpr double tiny = 1e-12;
    const std::size_t K = pred.dim(0);
    auto pv = pred.values();
    std::vector<double> dl(pv.size(), 0.0);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        const double* b = pv.data() + 4 * k;
        const double* t = target.data() + 4 * k;
        const double x1 = b[0] - b[2] / 2, x2 = b[0] + b[2] / 2, y1 = b[1] - b[3] / 2, y2 = b[1] + b[3] / 2;
        const double X1 = t[0] - t[2] / 2, X2 = t[0] + t[2] / 2, Y1 = t[1] - t[3] / 2, Y2 = t[1] + t[3] / 2;
        const double w = x2 - x1, h = y2 - y1;
        const double iw_raw = std::min(x2, X2) - std::max(x1, X1);
        const double ih_raw = std::min(y2, Y2) - std::max(y1, Y1);
        const double iw = std::max(0.0, iw_raw), ih = std::max(0.0, ih_raw);
        const double inter = iw * ih;
        const double ap = w * h, at = (X2 - X1) * (Y2 - Y1);
        const double uni = std::max(ap + at - inter, tiny);
        const double iou = inter / uni;
        const double cw = std::max(x2, X2) - std::min(x1, X1);
        const double ch = std::max(y2, Y2) - std::min(y1, Y1);
        const double encl = std::max(cw * ch, tiny);
        total += 2.0 - iou - uni / encl;

        // d/d(x1, x2, y1, y2)
        const double diw[4] = {iw_raw > 0 && x1 > X1 ? -1.0 : 0.0, iw_raw > 0 && x2 < X2 ? 1.0 : 0.0, 0, 0};
        const double dih[4] = {0, 0, ih_raw > 0 && y1 > Y1 ? -1.0 : 0.0, ih_raw > 0 && y2 < Y2 ? 1.0 : 0.0};
        const double dap[4] = {-h, h, -w, w};
        const double dcw[4] = {x1 < X1 ? -1.0 : 0.0, x2 > X2 ? 1.0 : 0.0, 0, 0};
        const double dch[4] = {0, 0, y1 < Y1 ? -1.0 : 0.0, y2 > Y2 ? 1.0 : 0.0};
        double dcorner[4];
        for (int i = 0; i < 4; ++i) {
            const double dinter = diw[i] * ih + dih[i] * iw;
            const double du = dap[i] - dinter;
            const double diou = (dinter * uni - inter * du) / (uni * uni);
            const double dC = dcw[i] * ch + dch[i] * cw;
            dcorner[i] = -diou - (du * encl - uni * dC) / (encl * encl);
        }
        double* g = dl.data() + 4 * k;
        g[0] = dcorner[0] + dcorner[1];
        g[1] = dcorner[2] + dcorner[3];
        g[2] = 0.5 * (dcorner[1] - dcorner[0]);
        g[3] = 0.5 * (dcorner[3] - dcorner[2]);
    }
    return emit({}, {total}, {&pred}, [dl = std::move(dl)](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < dl.size(); ++i) g[i] += self.grad[0] * dl[i];
    });
}

Tensor decode_box2d(const Tensor& raw, std::span<const double> ref_uv, std::span<const double> default_wh) {
    require(raw.rank() == 2 && raw.dim(1) == 4 && ref_uv.size() == 2 * raw.dim(0) && default_wh.size() == ref_uv.size(),
            "decode_box2d: raw " + shape_str(raw.shape()) + " vs " + std::to_string(ref_uv.size() / 2) + " references");
    const std::size_t M = raw.dim(0);
    auto rv = raw.values();
    std::vector<double> out(4 * M), dout(4 * M);
    for (std::size_t m = 0; m < M; ++m) {
        const double dw = default_wh[2 * m], dh = default_wh[2 * m + 1];
        const double s0 = sigmoid_scalar(rv[4 * m]), s1 = sigmoid_scalar(rv[4 * m + 1]);
        const double s2 = sigmoid_scalar(rv[4 * m + 2]), s3 = sigmoid_scalar(rv[4 * m + 3]);
        out[4 * m] = ref_uv[2 * m] + (2 * s0 - 1) * dw;
        out[4 * m + 1] = ref_uv[2 * m + 1] + (2 * s1 - 1) * dh;
        out[4 * m + 2] = dw * std::exp(2 * (2 * s2 - 1));
        out[4 * m + 3] = dh * std::exp(2 * (2 * s3 - 1));
        dout[4 * m] = 2 * s0 * (1 - s0) * dw;
        dout[4 * m + 1] = 2 * s1 * (1 - s1) * dh;
        dout[4 * m + 2] = out[4 * m + 2] * 4 * s2 * (1 - s2);
        dout[4 * m + 3] = out[4 * m + 3] * 4 * s3 * (1 - s3);
    }
    return emit({M, 4}, std::move(out), {&raw}, [dout = std::move(dout)](Node& self) {
        if (double* g = pgrad(self, 0))
            for (std::size_t i = 0; i < dout.size(); ++i) g[i] += self.grad[i] * dout[i];
    });
}

// -------------------------------------------------------------- verification

namespace {

double rel_err(double analytic, double numeric, double floor = 1e-8) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

double eval_no_tape(const std::function<Tensor()>& f) {
    TapeScope off(nullptr);
    Tensor y = f();
    return y.item();
}

}  // namespace

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    Tensor leaf(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
    std::vector<double> analytic;
    {
        Tape tape;
        TapeScope scope(&tape);
        Tensor y = f(leaf);
        tape.backward(y);
        analytic.assign(leaf.numel(), 0.0);
        if (leaf.has_grad()) analytic.assign(leaf.grad().begin(), leaf.grad().end());
    }
    double worst = 0.0;
    auto xv = leaf.values_mut();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double orig = xv[i];
        xv[i] = orig + eps;
        const double fp = eval_no_tape([&] { return f(leaf); });
        xv[i] = orig - eps;
        const double fm = eval_no_tape([&] { return f(leaf); });
        xv[i] = orig;
        worst = std::max(worst, rel_err(analytic[i], (fp - fm) / (2 * eps)));
    }
    return worst;
}

double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps,
                         std::size_t max_coords, std::uint64_t seed, double floor) {
    for (Tensor& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    std::vector<std::vector<double>> analytic(params.size());
    {
        Tape tape;
        TapeScope scope(&tape);
        Tensor y = f();
        tape.backward(y);
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].has_grad())
                analytic[i].assign(params[i].grad().begin(), params[i].grad().end());
            else
                analytic[i].assign(params[i].numel(), 0.0);
        }
    }
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto xv = params[i].values_mut();
        std::vector<std::size_t> coords(xv.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (max_coords != 0 && coords.size() > max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(max_coords);
        }
        for (std::size_t c : coords) {
            const double orig = xv[c];
            xv[c] = orig + eps;
            const double fp = eval_no_tape(f);
            xv[c] = orig - eps;
            const double fm = eval_no_tape(f);
            xv[c] = orig;
            worst = std::max(worst, rel_err(analytic[i][c], (fp - fm) / (2 * eps), floor));
        }
        params[i].zero_grad();
    }
    return worst;
}

}  // namespace hqdet
