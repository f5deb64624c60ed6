#include "affect/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

namespace affect {

namespace {

thread_local Tape* g_active_tape = nullptr;

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EMat>;
using ConstMatMap = Eigen::Map<const EMat>;

std::shared_ptr<TensorData> make_data(Shape shape, std::vector<double> values) {
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->values = std::move(values);
    return d;
}

} // namespace

long numel(const Shape& shape) {
    long n = 1;
    for (long d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

bool shapes_equal(const Shape& a, const Shape& b) { return a == b; }

Tensor Tensor::zeros(Shape shape) {
    long n = numel(shape);
    return Tensor(make_data(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
    long n = numel(shape);
    return Tensor(make_data(std::move(shape), std::vector<double>(static_cast<size_t>(n), value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    if (numel(shape) != static_cast<long>(values.size()))
        throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    return Tensor(make_data(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) {
    return Tensor(make_data(Shape{}, std::vector<double>{value}));
}

Tensor Tensor::param(Shape shape, std::vector<double> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
}

double Tensor::item() const {
    if (size() != 1)
        throw ShapeError("item() on tensor of size " + std::to_string(size()));
    return d_->values[0];
}

std::vector<double>& Tensor::grad() {
    if (d_->grad.empty())
        d_->grad.assign(static_cast<size_t>(numel(d_->shape)), 0.0);
    return d_->grad;
}

const std::vector<double>& Tensor::grad() const { return d_->grad; }

void Tensor::zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

void Tensor::free_grad() {
    d_->grad.clear();
    d_->grad.shrink_to_fit();
}

void Tensor::free_values() {
    d_->values.clear();
    d_->values.shrink_to_fit();
}

Tensor Tensor::clone() const {
    return Tensor(make_data(d_->shape, d_->values));
}

// ---------------------------------------------------------------- tape

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const Tensor& output, std::function<void()> backward_fn) {
    output.ptr()->on_tape = true;
    nodes_.push_back(Node{output, std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ShapeError("backward requires a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    if (!loss.tracked())
        throw ShapeError("backward on a loss that was not produced on an active tape");
    Tensor l = loss;
    l.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        TensorData* out = it->output.ptr();
        if (out->grad.empty()) continue; // no gradient reached this node
        it->backward_fn();
        if (!out->requires_grad) {
            out->grad.clear();
            out->grad.shrink_to_fit();
            if (release_memory_) {
                out->values.clear();
                out->values.shrink_to_fit();
            }
        }
    }
    if (release_memory_) nodes_.clear();
}

void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (!t) throw ShapeError("backward called with no active tape");
    t->backward(loss);
}

// ---------------------------------------------------------------- op helpers

namespace ops {

namespace {

bool recording(const Tensor& a) { return Tape::active() && a.tracked(); }
bool recording(const Tensor& a, const Tensor& b) {
    return Tape::active() && (a.tracked() || b.tracked());
}

void accumulate(Tensor t, const double* contrib, long n) {
    auto& g = t.grad();
    for (long i = 0; i < n; ++i) g[static_cast<size_t>(i)] += contrib[static_cast<size_t>(i)];
}

enum class EwKind { Add, Sub, Mul, Div };

Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind, const char* name) {
    const bool a_scalar = a.size() == 1;
    const bool b_scalar = b.size() == 1;
    if (!a_scalar && !b_scalar && !shapes_equal(a.shape(), b.shape()))
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
    const long n = numel(out_shape);
    std::vector<double> out(static_cast<size_t>(n));
    const double* pa = a.data();
    const double* pb = b.data();
    const long sa = a_scalar ? 0 : 1;
    const long sb = b_scalar ? 0 : 1;
    switch (kind) {
    case EwKind::Add:
        for (long i = 0; i < n; ++i) out[i] = pa[i * sa] + pb[i * sb];
        break;
    case EwKind::Sub:
        for (long i = 0; i < n; ++i) out[i] = pa[i * sa] - pb[i * sb];
        break;
    case EwKind::Mul:
        for (long i = 0; i < n; ++i) out[i] = pa[i * sa] * pb[i * sb];
        break;
    case EwKind::Div:
        for (long i = 0; i < n; ++i) out[i] = pa[i * sa] / pb[i * sb];
        break;
    }
    Tensor y = Tensor::from(out_shape, std::move(out));
    if (recording(a, b)) {
        Tensor ta = a, tb = b, ty = y;
        Tape::active()->record(y, [ta, tb, ty, kind, n, sa, sb]() mutable {
            const auto& og = ty.ptr()->grad;
            if (ta.tracked()) {
                auto& g = ta.grad();
                for (long i = 0; i < n; ++i) {
                    double d = 0;
                    switch (kind) {
                    case EwKind::Add: d = og[i]; break;
                    case EwKind::Sub: d = og[i]; break;
                    case EwKind::Mul: d = og[i] * tb.data()[i * sb]; break;
                    case EwKind::Div: d = og[i] / tb.data()[i * sb]; break;
                    }
                    g[static_cast<size_t>(i * sa)] += d;
                }
            }
            if (tb.tracked()) {
                auto& g = tb.grad();
                for (long i = 0; i < n; ++i) {
                    double d = 0;
                    switch (kind) {
                    case EwKind::Add: d = og[i]; break;
                    case EwKind::Sub: d = -og[i]; break;
                    case EwKind::Mul: d = og[i] * ta.data()[i * sa]; break;
                    case EwKind::Div: {
                        double bv = tb.data()[i * sb];
                        d = -og[i] * ta.data()[i * sa] / (bv * bv);
                        break;
                    }
                    }
                    g[static_cast<size_t>(i * sb)] += d;
                }
            }
        });
    }
    return y;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Div, "div"); }

Tensor scale(const Tensor& a, double s) {
    const long n = a.size();
    std::vector<double> out(static_cast<size_t>(n));
    const double* pa = a.data();
    for (long i = 0; i < n; ++i) out[i] = pa[i] * s;
    Tensor y = Tensor::from(a.shape(), std::move(out));
    if (recording(a)) {
        Tensor ta = a, ty = y;
        Tape::active()->record(y, [ta, ty, s, n]() mutable {
            if (!ta.tracked()) return;
            const auto& og = ty.ptr()->grad;
            auto& g = ta.grad();
            for (long i = 0; i < n; ++i) g[i] += og[i] * s;
        });
    }
    return y;
}

Tensor add_scalar(const Tensor& a, double s) {
    const long n = a.size();
    std::vector<double> out(static_cast<size_t>(n));
    const double* pa = a.data();
    for (long i = 0; i < n; ++i) out[i] = pa[i] + s;
    Tensor y = Tensor::from(a.shape(), std::move(out));
    if (recording(a)) {
        Tensor ta = a, ty = y;
        Tape::active()->record(y, [ta, ty, n]() mutable {
            if (!ta.tracked()) return;
            const auto& og = ty.ptr()->grad;
            accumulate(ta, og.data(), n);
        });
    }
    return y;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul requires rank-2 tensors, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const long m = trans_a ? a.dim(1) : a.dim(0);
    const long ka = trans_a ? a.dim(0) : a.dim(1);
    const long kb = trans_b ? b.dim(1) : b.dim(0);
    const long n = trans_b ? b.dim(0) : b.dim(1);
    if (ka != kb)
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) +
                         (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                         (trans_b ? "^T" : ""));
    Tensor y = Tensor::zeros({m, n});
    {
        ConstMatMap A(a.data(), a.dim(0), a.dim(1));
        ConstMatMap B(b.data(), b.dim(0), b.dim(1));
        MatMap Y(y.data(), m, n);
        if (!trans_a && !trans_b)
            Y.noalias() = A * B;
        else if (trans_a && !trans_b)
            Y.noalias() = A.transpose() * B;
        else if (!trans_a && trans_b)
            Y.noalias() = A * B.transpose();
        else
            Y.noalias() = A.transpose() * B.transpose();
    }
    if (recording(a, b)) {
        Tensor ta = a, tb = b, ty = y;
        Tape::active()->record(y, [ta, tb, ty, trans_a, trans_b, m, n]() mutable {
            ConstMatMap G(ty.ptr()->grad.data(), m, n);
            if (ta.tracked()) {
                ConstMatMap B(tb.data(), tb.dim(0), tb.dim(1));
                MatMap GA(ta.grad().data(), ta.dim(0), ta.dim(1));
                if (!trans_a && !trans_b)
                    GA.noalias() += G * B.transpose();
                else if (trans_a && !trans_b)
                    GA.noalias() += B * G.transpose();
                else if (!trans_a && trans_b)
                    GA.noalias() += G * B;
                else
                    GA.noalias() += B.transpose() * G.transpose();
            }
            if (tb.tracked()) {
                ConstMatMap A(ta.data(), ta.dim(0), ta.dim(1));
                MatMap GB(tb.grad().data(), tb.dim(0), tb.dim(1));
                if (!trans_a && !trans_b)
                    GB.noalias() += A.transpose() * G;
                else if (trans_a && !trans_b)
                    GB.noalias() += A * G;
                else if (!trans_a && trans_b)
                    GB.noalias() += G.transpose() * A;
                else
                    GB.noalias() += G.transpose() * A.transpose();
            }
        });
    }
    return y;
}

Tensor reduce_sum(const Tensor& a) {
    const long n = a.size();
    if (n == 0) throw ShapeError("reduce_sum of empty tensor");
    double s = 0;
    const double* pa = a.data();
    for (long i = 0; i < n; ++i) s += pa[i];
    Tensor y = Tensor::scalar(s);
    if (recording(a)) {
        Tensor ta = a, ty = y;
        Tape::active()->record(y, [ta, ty, n]() mutable {
            if (!ta.tracked()) return;
            const double og = ty.ptr()->grad[0];
            auto& g = ta.grad();
            for (long i = 0; i < n; ++i) g[i] += og;
        });
    }
    return y;
}

Tensor reduce_mean(const Tensor& a) {
    const long n = a.size();
    if (n == 0) throw ShapeError("reduce_mean of empty tensor");
    double s = 0;
    const double* pa = a.data();
    for (long i = 0; i < n; ++i) s += pa[i];
    Tensor y = Tensor::scalar(s / static_cast<double>(n));
    if (recording(a)) {
        Tensor ta = a, ty = y;
        Tape::active()->record(y, [ta, ty, n]() mutable {
            if (!ta.tracked()) return;
            const double og = ty.ptr()->grad[0] / static_cast<double>(n);
            auto& g = ta.grad();
            for (long i = 0; i < n; ++i) g[i] += og;
        });
    }
    return y;
}

Tensor variance(const Tensor& a) {
    const long n = a.size();
    if (n == 0) throw ShapeError("variance of empty tensor");
    const double* pa = a.data();
    double mu = 0;
    for (long i = 0; i < n; ++i) mu += pa[i];
    mu /= static_cast<double>(n);
    double v = 0;
    for (long i = 0; i < n; ++i) v += (pa[i] - mu) * (pa[i] - mu);
    v /= static_cast<double>(n);
    Tensor y = Tensor::scalar(v);
    if (recording(a)) {
        Tensor ta = a, ty = y;
        Tape::active()->record(y, [ta, ty, n, mu]() mutable {
            if (!ta.tracked()) return;
            const double og = ty.ptr()->grad[0];
            const double* pa = ta.data();
            auto& g = ta.grad();
            const double c = 2.0 * og / static_cast<double>(n);
            for (long i = 0; i < n; ++i) g[i] += c * (pa[i] - mu);
        });
    }
    return y;
}

Tensor covariance(const Tensor& a, const Tensor& b) {
    const long n = a.size();
    if (n == 0) throw ShapeError("covariance of empty tensor");
    if (b.size() != n)
        throw ShapeError("covariance length mismatch: " + std::to_string(n) + " vs " +
                         std::to_string(b.size()));
    const double* pa = a.data();
    const double* pb = b.data();
    double mu_a = 0, mu_b = 0;
    for (long i = 0; i < n; ++i) {
        mu_a += pa[i];
        mu_b += pb[i];
    }
    mu_a /= static_cast<double>(n);
    mu_b /= static_cast<double>(n);
    double c = 0;
    for (long i = 0; i < n; ++i) c += (pa[i] - mu_a) * (pb[i] - mu_b);
    c /= static_cast<double>(n);
    Tensor y = Tensor::scalar(c);
    if (recording(a, b)) {
        Tensor ta = a, tb = b, ty = y;
        Tape::active()->record(y, [ta, tb, ty, n, mu_a, mu_b]() mutable {
            const double og = ty.ptr()->grad[0] / static_cast<double>(n);
            if (ta.tracked()) {
                const double* pb = tb.data();
                auto& g = ta.grad();
                for (long i = 0; i < n; ++i) g[i] += og * (pb[i] - mu_b);
            }
            if (tb.tracked()) {
                const double* pa = ta.data();
                auto& g = tb.grad();
                for (long i = 0; i < n; ++i) g[i] += og * (pa[i] - mu_a);
            }
        });
    }
    return y;
}

Tensor sum_squared_diff(const Tensor& a, const Tensor& b) {
    const long n = a.size();
    if (n == 0) throw ShapeError("sum_squared_diff of empty tensor");
    if (!shapes_equal(a.shape(), b.shape()))
        throw ShapeError("sum_squared_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const double* pa = a.data();
    const double* pb = b.data();
    double s = 0;
    for (long i = 0; i < n; ++i) {
        const double d = pa[i] - pb[i];
        s += d * d;
    }
    Tensor y = Tensor::scalar(s);
    if (recording(a, b)) {
        Tensor ta = a, tb = b, ty = y;
        Tape::active()->record(y, [ta, tb, ty, n]() mutable {
            const double og = ty.ptr()->grad[0];
            const double* pa = ta.data();
            const double* pb = tb.data();
            if (ta.tracked()) {
                auto& g = ta.grad();
                for (long i = 0; i < n; ++i) g[i] += 2.0 * og * (pa[i] - pb[i]);
            }
            if (tb.tracked()) {
                auto& g = tb.grad();
                for (long i = 0; i < n; ++i) g[i] -= 2.0 * og * (pa[i] - pb[i]);
            }
        });
    }
    return y;
}

Tensor sigmoid(const Tensor& a) {
    const long n = a.size();
    std::vector<double> out(static_cast<size_t>(n));
    const double* pa = a.data();
    for (long i = 0; i < n; ++i) {
        const double x = pa[i];
        if (x >= 0) {
            out[i] = 1.0 / (1.0 + std::exp(-x));
        } else {
            const double e = std::exp(x);
            out[i] = e / (1.0 + e);
        }
    }
    Tensor y = Tensor::from(a.shape(), std::move(out));
    if (recording(a)) {
        Tensor ta = a, ty = y;
        Tape::active()->record(y, [ta, ty, n]() mutable {
            if (!ta.tracked()) return;
            const auto& og = ty.ptr()->grad;
            const double* py = ty.data();
            auto& g = ta.grad();
            for (long i = 0; i < n; ++i) g[i] += og[i] * py[i] * (1.0 - py[i]);
        });
    }
    return y;
}

Tensor tanh(const Tensor& a) {
    const long n = a.size();
    std::vector<double> out(static_cast<size_t>(n));
    const double* pa = a.data();
    for (long i = 0; i < n; ++i) out[i] = std::tanh(pa[i]);
    Tensor y = Tensor::from(a.shape(), std::move(out));
    if (recording(a)) {
        Tensor ta = a, ty = y;
        Tape::active()->record(y, [ta, ty, n]() mutable {
            if (!ta.tracked()) return;
            const auto& og = ty.ptr()->grad;
            const double* py = ty.data();
            auto& g = ta.grad();
            for (long i = 0; i < n; ++i) g[i] += og[i] * (1.0 - py[i] * py[i]);
        });
    }
    return y;
}

Tensor leaky_relu(const Tensor& a, double slope) {
    const long n = a.size();
    std::vector<double> out(static_cast<size_t>(n));
    const double* pa = a.data();
    for (long i = 0; i < n; ++i) out[i] = pa[i] >= 0 ? pa[i] : slope * pa[i];
    Tensor y = Tensor::from(a.shape(), std::move(out));
    if (recording(a)) {
        // slope > 0 keeps sign(y) == sign(x), so the mask is read off y.
        Tensor ta = a, ty = y;
        Tape::active()->record(y, [ta, ty, n, slope]() mutable {
            if (!ta.tracked()) return;
            const auto& og = ty.ptr()->grad;
            const double* py = ty.data();
            auto& g = ta.grad();
            for (long i = 0; i < n; ++i) g[i] += og[i] * (py[i] >= 0 ? 1.0 : slope);
        });
    }
    return y;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (!a.defined() && !b.defined()) throw ShapeError("concat_cols of two undefined tensors");
    if (!a.defined()) return b;
    if (!b.defined()) return a;
    if (a.rank() != b.rank() || a.rank() < 1 || a.rank() > 2)
        throw ShapeError("concat_cols requires matching rank-1 or rank-2 tensors, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const bool vec = a.rank() == 1;
    const long rows = vec ? 1 : a.dim(0);
    if (!vec && b.dim(0) != rows)
        throw ShapeError("concat_cols row mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const long na = vec ? a.dim(0) : a.dim(1);
    const long nb = vec ? b.dim(0) : b.dim(1);
    Shape out_shape = vec ? Shape{na + nb} : Shape{rows, na + nb};
    std::vector<double> out(static_cast<size_t>(rows * (na + nb)));
    const double* pa = a.data();
    const double* pb = b.data();
    for (long r = 0; r < rows; ++r) {
        std::copy(pa + r * na, pa + (r + 1) * na, out.begin() + r * (na + nb));
        std::copy(pb + r * nb, pb + (r + 1) * nb, out.begin() + r * (na + nb) + na);
    }
    Tensor y = Tensor::from(std::move(out_shape), std::move(out));
    if (recording(a, b)) {
        Tensor ta = a, tb = b, ty = y;
        Tape::active()->record(y, [ta, tb, ty, rows, na, nb]() mutable {
            const auto& og = ty.ptr()->grad;
            if (ta.tracked()) {
                auto& g = ta.grad();
                for (long r = 0; r < rows; ++r)
                    for (long j = 0; j < na; ++j) g[r * na + j] += og[r * (na + nb) + j];
            }
            if (tb.tracked()) {
                auto& g = tb.grad();
                for (long r = 0; r < rows; ++r)
                    for (long j = 0; j < nb; ++j) g[r * nb + j] += og[r * (na + nb) + na + j];
            }
        });
    }
    return y;
}

Tensor select_rows(const Tensor& a, std::vector<long> rows) {
    if (a.rank() < 1) throw ShapeError("select_rows on scalar");
    const long n_rows = a.dim(0);
    long row_size = 1;
    for (int i = 1; i < a.rank(); ++i) row_size *= a.dim(i);
    Shape out_shape = a.shape();
    out_shape[0] = static_cast<long>(rows.size());
    std::vector<double> out(static_cast<size_t>(row_size) * rows.size());
    const double* pa = a.data();
    for (size_t i = 0; i < rows.size(); ++i) {
        const long r = rows[i];
        if (r < 0 || r >= n_rows)
            throw ShapeError("select_rows index " + std::to_string(r) + " out of range [0," +
                             std::to_string(n_rows) + ")");
        std::copy(pa + r * row_size, pa + (r + 1) * row_size,
                  out.begin() + static_cast<long>(i) * row_size);
    }
    Tensor y = Tensor::from(std::move(out_shape), std::move(out));
    if (recording(a)) {
        Tensor ta = a, ty = y;
        auto idx = std::move(rows);
        Tape::active()->record(y, [ta, ty, idx, row_size]() mutable {
            if (!ta.tracked()) return;
            const auto& og = ty.ptr()->grad;
            auto& g = ta.grad();
            for (size_t i = 0; i < idx.size(); ++i) {
                const long r = idx[i];
                for (long j = 0; j < row_size; ++j)
                    g[r * row_size + j] += og[static_cast<long>(i) * row_size + j];
            }
        });
    }
    return y;
}

Tensor select_col(const Tensor& a, long col) {
    if (a.rank() != 2) throw ShapeError("select_col requires rank-2, got " + shape_str(a.shape()));
    const long rows = a.dim(0), cols = a.dim(1);
    if (col < 0 || col >= cols)
        throw ShapeError("select_col index " + std::to_string(col) + " out of range");
    std::vector<double> out(static_cast<size_t>(rows));
    const double* pa = a.data();
    for (long r = 0; r < rows; ++r) out[r] = pa[r * cols + col];
    Tensor y = Tensor::from({rows}, std::move(out));
    if (recording(a)) {
        Tensor ta = a, ty = y;
        Tape::active()->record(y, [ta, ty, rows, cols, col]() mutable {
            if (!ta.tracked()) return;
            const auto& og = ty.ptr()->grad;
            auto& g = ta.grad();
            for (long r = 0; r < rows; ++r) g[r * cols + col] += og[r];
        });
    }
    return y;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor y = Tensor::from(std::move(shape), a.values());
    if (recording(a)) {
        Tensor ta = a, ty = y;
        const long n = a.size();
        Tape::active()->record(y, [ta, ty, n]() mutable {
            if (!ta.tracked()) return;
            accumulate(ta, ty.ptr()->grad.data(), n);
        });
    }
    return y;
}

} // namespace ops

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    if (eps <= 0) throw ConfigError("grad_check eps must be positive");
    Tensor xa = x.clone();
    xa.set_requires_grad(true);
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor y = f(xa);
        if (y.size() != 1)
            throw ShapeError("grad_check requires a scalar-valued function, got " +
                             shape_str(y.shape()));
        if (y.tracked()) tape.backward(y); // untracked output means f is constant in x
        analytic = xa.has_grad() ? xa.grad() : std::vector<double>(x.size(), 0.0);
        if (analytic.empty()) analytic.assign(static_cast<size_t>(x.size()), 0.0);
    }
    Tensor xn = x.clone();
    double max_rel = 0;
    for (long i = 0; i < x.size(); ++i) {
        const double orig = xn.values()[i];
        xn.values()[i] = orig + eps;
        const double fp = f(xn).item();
        xn.values()[i] = orig - eps;
        const double fm = f(xn).item();
        xn.values()[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[static_cast<size_t>(i)];
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        if (rel > max_rel) max_rel = rel;
    }
    return max_rel;
}

} // namespace affect
