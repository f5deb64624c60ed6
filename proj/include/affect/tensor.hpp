#ifndef AFFECT_TENSOR_HPP
#define AFFECT_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "affect/errors.hpp"

namespace affect {

using Shape = std::vector<long>;

long numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool shapes_equal(const Shape& a, const Shape& b);

struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;      // empty until touched by backward
    bool requires_grad = false;    // leaf parameter
    bool on_tape = false;          // produced by a recorded op
};

// Shared handle onto a dense row-major f64 buffer. Copying a Tensor copies
// the handle; clone() copies the storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    // Leaf with requires_grad set; gradients accumulate across backward calls.
    static Tensor param(Shape shape, std::vector<double> values);

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    long dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    long size() const { return static_cast<long>(d_->values.size()); }

    std::vector<double>& values() { return d_->values; }
    const std::vector<double>& values() const { return d_->values; }
    double* data() { return d_->values.data(); }
    const double* data() const { return d_->values.data(); }
    double item() const;

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool b) { d_->requires_grad = b; }
    bool on_tape() const { return d_->on_tape; }
    bool tracked() const { return d_->requires_grad || d_->on_tape; }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<double>& grad();          // allocates zeros on first use
    const std::vector<double>& grad() const;
    void zero_grad();                     // zero without freeing
    void free_grad();
    void free_values();                   // shape is kept

    Tensor clone() const;

    TensorData* ptr() const { return d_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;
    friend class Tape;
};

// Records one backward closure per op, in execution order. A tape confines
// itself to the thread that created it; the most recently constructed tape
// on the thread is the active one ops record onto.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(const Tensor& output, std::function<void()> backward_fn);

    // Seeds d(loss)/d(loss) = 1 and walks nodes in reverse. Leaf gradients
    // accumulate across calls; intermediate gradients are cleared as they
    // are consumed.
    void backward(const Tensor& loss);

    // When set, intermediate values are freed as backward consumes them.
    // Such a tape is single-shot: nodes are dropped after the walk.
    void set_release_memory(bool b) { release_memory_ = b; }

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor output;
        std::function<void()> backward_fn;
    };
    std::vector<Node> nodes_;
    bool release_memory_ = false;
    Tape* prev_ = nullptr;
};

// Backward through the active tape (errors when none is active).
void backward(const Tensor& loss);

namespace ops {

// Elementwise; shapes must match or one operand must be a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

// a [m,k] x b [k,n] -> [m,n]; trans flags transpose the stored operand.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);

Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
// Population statistics (divide by n).
Tensor variance(const Tensor& a);
Tensor covariance(const Tensor& a, const Tensor& b);
// sum((a-b)^2) over all elements.
Tensor sum_squared_diff(const Tensor& a, const Tensor& b);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);

// [B,m] (+) [B,n] -> [B,m+n]; rank-1 operands fuse to a longer vector.
// Either side may be undefined, which yields the other unchanged.
Tensor concat_cols(const Tensor& a, const Tensor& b);
// Row gather on the leading dimension.
Tensor select_rows(const Tensor& a, std::vector<long> rows);
// Column j of [B,n] as [B].
Tensor select_col(const Tensor& a, long col);
Tensor reshape(const Tensor& a, Shape shape);

} // namespace ops

// Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|),
// numeric by central differences. f must be scalar-valued.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

} // namespace affect

#endif
