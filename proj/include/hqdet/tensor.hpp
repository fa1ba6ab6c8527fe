#pragma once

// Dense double-precision tensors with a reverse-mode differentiation tape.
//
// Ops record onto the thread's active Tape (see TapeScope) whenever at least
// one input requires a gradient. Without an active tape every op is a plain
// value computation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hqdet {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Shapes of the operands are incompatible.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A caller broke an op's precondition (e.g. a fully masked softmax row).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// API misuse, e.g. backward from a non-scalar.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor filled(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t numel() const;

    std::span<const double> values() const;
    /// Mutable view for leaves (parameters, inputs). Never mutate a tensor
    /// that an unfinished tape still references.
    std::span<double> values_mut();

    double at(std::size_t i) const;
    double at(std::size_t i, std::size_t j) const;
    double at(std::size_t i, std::size_t j, std::size_t k) const;
    double item() const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> grad_mut();
    void zero_grad();

    /// Value copy cut from the tape.
    Tensor detach() const;

    const std::shared_ptr<detail::Node>& handle() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

class Tape {
public:
    void record(std::shared_ptr<detail::Node> node);
    /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward closure in
    /// exact reverse recording order.
    void backward(const Tensor& loss);
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Installs `tape` as this thread's recording target for the scope's
/// lifetime. Passing nullptr disables recording (inference / finite
/// differences).
class TapeScope {
public:
    explicit TapeScope(Tape* tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

// ---------------------------------------------------------------- arithmetic

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
/// x[R, d] + row[d] broadcast over rows.
Tensor add_row(const Tensor& x, const Tensor& row);

Tensor relu(const Tensor& x);
/// tanh-approximated GELU; smooth everywhere, which keeps finite-difference
/// checks free of kinks.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ------------------------------------------------------------ linear algebra

/// [.., p, q] x [.., q, r]. Leading batch dims must match, or one operand
/// must be a plain matrix that is shared across the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[.., d_in] W[d_in, d_out] + b[d_out]. `b` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Swaps the last two dims.
Tensor transpose(const Tensor& x);

/// `mask` holds additive entries (0 or -inf) and has the trailing shape of
/// `logits` (it is broadcast over leading dims). An undefined mask means no
/// masking. A row with every entry masked throws ContractError.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);
Tensor softmax(const Tensor& logits);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ----------------------------------------------------------------- reshaping

Tensor reshape(const Tensor& x, Shape shape);
/// [n, h*d] -> [h, n, d]
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [h, n, d] -> [n, h*d]
Tensor merge_heads(const Tensor& x);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// out[j] = x[index[j]]
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
/// out[i] = sum of x[j] over j with owner[j] == i.
Tensor segment_sum_rows(const Tensor& x, std::span<const std::size_t> owner, std::size_t num_segments);
/// out[i] = mean of x[j] over j with owner[j] == i; zero row when none.
Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> owner, std::size_t num_segments);

// ------------------------------------------------------------------ sampling

/// Bilinear interpolation of featmap[H, W, C] at points[P, 2] given as (u, v)
/// = (column, row) in cell-center coordinates. Corners outside the grid read
/// as zero. Differentiable in both featmap and points.
Tensor bilinear_sample(const Tensor& featmap, const Tensor& points);

/// Deformable-attention reduction. `sampled` is [Q*H*P, C] in (query, head,
/// point) order, `weights` is [Q, H*P]. Head h only reads channel slice
/// [h*C/H, (h+1)*C/H) of its samples.
Tensor deform_combine(const Tensor& sampled, const Tensor& weights, std::size_t heads);

// -------------------------------------------------------------------- losses

/// Sum of sigmoid focal loss over logits[K, C]; `target[k]` is the positive
/// class of row k or -1 for background.
Tensor sigmoid_focal_loss(const Tensor& logits, std::span<const int> target, double alpha = 0.25,
                          double gamma = 2.0);
/// sum_k sum_d w[d] |pred[k,d] - target[k,d]|
Tensor weighted_l1(const Tensor& pred, std::span<const double> target, std::span<const double> col_weights);
/// sum_k (1 - GIoU(pred_k, target_k)) for (cx, cy, w, h) boxes.
Tensor giou_loss(const Tensor& pred, std::span<const double> target);

/// Maps raw[M, 4] head outputs to pixel boxes (cx, cy, w, h) around the
/// reference point with sigmoid-bounded deltas: the center moves by at most
/// one default extent, the size scales within [e^-2, e^2] of the default.
/// Zero raw output yields the default box centered on the reference.
Tensor decode_box2d(const Tensor& raw, std::span<const double> ref_uv, std::span<const double> default_wh);

// -------------------------------------------------------------- verification

/// Max over coordinates of |analytic - central difference| /
/// max(|analytic|, |fd|, 1e-8) for a scalar function of one tensor.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

/// Same check against leaf parameters mutated in place; probes at most
/// `max_coords` randomly chosen coordinates per parameter (0 = all).
/// `floor` replaces 1e-8 in the denominator; raise it when the loss is large
/// enough that difference quotients carry noise above 1e-8.
double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps = 1e-5,
                         std::size_t max_coords = 0, std::uint64_t seed = 0, double floor = 1e-8);

}  // namespace hqdet
