#include "affect/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace affect {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EMat>;
using ConstMatMap = Eigen::Map<const EMat>;

constexpr long kScratchBytes = 32L << 20; // per im2col buffer

bool any_tracked(std::initializer_list<Tensor> ts) {
    if (!Tape::active()) return false;
    for (const Tensor& t : ts)
        if (t.defined() && t.tracked()) return true;
    return false;
}

// The conv view: "big" grid (H,W,C) strides down to the "small" grid (Ho,Wo).
// conv reads patches off the big side; deconv scatters patches onto it.
struct ConvGeom {
    long N, H, W, C;
    long kh, kw, s;
    long Ho, Wo;
    long ph, pw;
    long cols;            // kh*kw*C
    long rows_per_frame;  // Ho*Wo

    bool pointwise() const { return kh == 1 && kw == 1 && s == 1; }
};

ConvGeom make_geom(long N, long H, long W, long C, long kh, long kw, long s) {
    Geometry gh = same_ceil(H, kh, s);
    Geometry gw = same_ceil(W, kw, s);
    ConvGeom g;
    g.N = N; g.H = H; g.W = W; g.C = C;
    g.kh = kh; g.kw = kw; g.s = s;
    g.Ho = gh.out; g.Wo = gw.out;
    g.ph = gh.pad_before; g.pw = gw.pad_before;
    g.cols = kh * kw * C;
    g.rows_per_frame = g.Ho * g.Wo;
    return g;
}

long frames_per_chunk(const ConvGeom& g) {
    long bytes_per_frame = g.rows_per_frame * g.cols * 8;
    return std::clamp(kScratchBytes / std::max(bytes_per_frame, 1L), 1L, g.N);
}

// Gather patch rows for frames [f0,f1) into M [ (f1-f0)*Ho*Wo, cols ].
// src indexes the big grid; when mask is given the value is scaled by the
// LReLU derivative read off mask's sign (the deconv backward path).
void patch_gather(const ConvGeom& g, const double* src, const double* mask, double slope,
                  long f0, long f1, double* M) {
    for (long n = f0; n < f1; ++n) {
        double* frame_rows = M + (n - f0) * g.rows_per_frame * g.cols;
        for (long oy = 0; oy < g.Ho; ++oy) {
            for (long ox = 0; ox < g.Wo; ++ox) {
                double* row = frame_rows + (oy * g.Wo + ox) * g.cols;
                const long iy0 = oy * g.s - g.ph;
                const long ix0 = ox * g.s - g.pw;
                for (long dy = 0; dy < g.kh; ++dy) {
                    const long iy = iy0 + dy;
                    double* drow = row + dy * g.kw * g.C;
                    if (iy < 0 || iy >= g.H) {
                        std::fill(drow, drow + g.kw * g.C, 0.0);
                        continue;
                    }
                    for (long dx = 0; dx < g.kw; ++dx) {
                        const long ix = ix0 + dx;
                        double* dst = drow + dx * g.C;
                        if (ix < 0 || ix >= g.W) {
                            std::fill(dst, dst + g.C, 0.0);
                        } else {
                            const long base = ((n * g.H + iy) * g.W + ix) * g.C;
                            if (!mask) {
                                std::copy(src + base, src + base + g.C, dst);
                            } else {
                                for (long c = 0; c < g.C; ++c)
                                    dst[c] = src[base + c] *
                                             (mask[base + c] >= 0 ? 1.0 : slope);
                            }
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of patch_gather: scatter-add M rows back onto the big grid.
void patch_scatter(const ConvGeom& g, const double* M, long f0, long f1, double* dst) {
    for (long n = f0; n < f1; ++n) {
        const double* frame_rows = M + (n - f0) * g.rows_per_frame * g.cols;
        for (long oy = 0; oy < g.Ho; ++oy) {
            for (long ox = 0; ox < g.Wo; ++ox) {
                const double* row = frame_rows + (oy * g.Wo + ox) * g.cols;
                const long iy0 = oy * g.s - g.ph;
                const long ix0 = ox * g.s - g.pw;
                for (long dy = 0; dy < g.kh; ++dy) {
                    const long iy = iy0 + dy;
                    if (iy < 0 || iy >= g.H) continue;
                    const double* srow = row + dy * g.kw * g.C;
                    for (long dx = 0; dx < g.kw; ++dx) {
                        const long ix = ix0 + dx;
                        if (ix < 0 || ix >= g.W) continue;
                        double* out = dst + ((n * g.H + iy) * g.W + ix) * g.C;
                        const double* in = srow + dx * g.C;
                        for (long c = 0; c < g.C; ++c) out[c] += in[c];
                    }
                }
            }
        }
    }
}

void bias_act_rows(double* y, long rows, long cout, const double* b, Act act, double slope) {
    for (long r = 0; r < rows; ++r) {
        double* row = y + r * cout;
        if (b)
            for (long c = 0; c < cout; ++c) row[c] += b[c];
        if (act == Act::LRelu)
            for (long c = 0; c < cout; ++c)
                if (row[c] < 0) row[c] *= slope;
    }
}

// dYm[i] = dY[i] * LReLU'(Y[i]); with no activation dY passes through.
void masked_grad(const double* dy, const double* y, Act act, double slope, long n,
                 std::vector<double>& out) {
    out.resize(static_cast<size_t>(n));
    if (act == Act::LRelu) {
        for (long i = 0; i < n; ++i) out[i] = dy[i] * (y[i] >= 0 ? 1.0 : slope);
    } else {
        std::copy(dy, dy + n, out.begin());
    }
}

struct LogicalInput {
    long N, H, W, C;
    bool batched;
};

LogicalInput parse_2d(const Tensor& x, long cin, const char* who) {
    if (x.rank() == 3) {
        if (x.dim(2) != cin)
            throw ShapeError(std::string(who) + ": input " + shape_str(x.shape()) +
                             " has " + std::to_string(x.dim(2)) + " channels, spec wants " +
                             std::to_string(cin));
        return {1, x.dim(0), x.dim(1), x.dim(2), false};
    }
    if (x.rank() == 4) {
        if (x.dim(3) != cin)
            throw ShapeError(std::string(who) + ": input " + shape_str(x.shape()) +
                             " has " + std::to_string(x.dim(3)) + " channels, spec wants " +
                             std::to_string(cin));
        return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
    }
    throw ShapeError(std::string(who) + ": expected rank 3 or 4, got " + shape_str(x.shape()));
}

LogicalInput parse_1d(const Tensor& x, long cin, const char* who) {
    if (x.rank() == 2) {
        if (x.dim(1) != cin)
            throw ShapeError(std::string(who) + ": input " + shape_str(x.shape()) +
                             " has " + std::to_string(x.dim(1)) + " channels, spec wants " +
                             std::to_string(cin));
        return {1, 1, x.dim(0), x.dim(1), false};
    }
    if (x.rank() == 3) {
        if (x.dim(2) != cin)
            throw ShapeError(std::string(who) + ": input " + shape_str(x.shape()) +
                             " has " + std::to_string(x.dim(2)) + " channels, spec wants " +
                             std::to_string(cin));
        return {x.dim(0), 1, x.dim(1), x.dim(2), true};
    }
    throw ShapeError(std::string(who) + ": expected rank 2 or 3, got " + shape_str(x.shape()));
}

long kernel_extent(const ConvSpec& spec, bool one_d, int axis, const char* who) {
    size_t want = one_d ? 1 : 2;
    if (spec.kernel.size() != want)
        throw ShapeError(std::string(who) + ": kernel spec has " +
                         std::to_string(spec.kernel.size()) + " extents, wants " +
                         std::to_string(want));
    return spec.kernel[static_cast<size_t>(one_d ? 0 : axis)];
}

Tensor conv_impl(const Tensor& x, const ConvParams& p, Act act, double slope, bool one_d,
                 const char* who) {
    LogicalInput in = one_d ? parse_1d(x, p.spec.in_channels, who)
                            : parse_2d(x, p.spec.in_channels, who);
    const long kh = one_d ? 1 : kernel_extent(p.spec, one_d, 0, who);
    const long kw = kernel_extent(p.spec, one_d, 1, who);
    const long cout = p.spec.out_channels;
    ConvGeom g = make_geom(in.N, in.H, in.W, in.C, kh, kw, p.spec.stride);
    if (p.weight.size() != g.cols * cout)
        throw ShapeError(std::string(who) + ": weight " + shape_str(p.weight.shape()) +
                         " does not match kernel geometry");

    Shape out_shape;
    if (one_d)
        out_shape = in.batched ? Shape{in.N, g.Wo, cout} : Shape{g.Wo, cout};
    else
        out_shape = in.batched ? Shape{in.N, g.Ho, g.Wo, cout} : Shape{g.Ho, g.Wo, cout};
    Tensor y = Tensor::zeros(out_shape);

    const double* bias = p.bias.defined() ? p.bias.data() : nullptr;
    ConstMatMap Wm(p.weight.data(), g.cols, cout);

    if (g.pointwise()) {
        const long rows = g.N * g.rows_per_frame;
        ConstMatMap X(x.data(), rows, g.C);
        MatMap Y(y.data(), rows, cout);
        Y.noalias() = X * Wm;
        bias_act_rows(y.data(), rows, cout, bias, act, slope);
    } else {
        const long fpc = frames_per_chunk(g);
        std::vector<double> M(static_cast<size_t>(fpc * g.rows_per_frame * g.cols));
        for (long f0 = 0; f0 < g.N; f0 += fpc) {
            const long f1 = std::min(f0 + fpc, g.N);
            const long rows = (f1 - f0) * g.rows_per_frame;
            patch_gather(g, x.data(), nullptr, 0, f0, f1, M.data());
            MatMap Y(y.data() + f0 * g.rows_per_frame * cout, rows, cout);
            ConstMatMap Mm(M.data(), rows, g.cols);
            Y.noalias() = Mm * Wm;
            bias_act_rows(y.data() + f0 * g.rows_per_frame * cout, rows, cout, bias, act, slope);
        }
    }

    if (any_tracked({x, p.weight, p.bias})) {
        Tensor tx = x, tw = p.weight, tb = p.bias, ty = y;
        Tape::active()->record(y, [tx, tw, tb, ty, g, cout, act, slope]() mutable {
            std::vector<double> dym;
            masked_grad(ty.ptr()->grad.data(), ty.data(), act, slope,
                        g.N * g.rows_per_frame * cout, dym);
            if (tb.defined() && tb.tracked()) {
                auto& bg = tb.grad();
                for (long r = 0; r < g.N * g.rows_per_frame; ++r)
                    for (long c = 0; c < cout; ++c) bg[c] += dym[r * cout + c];
            }
            const bool need_w = tw.tracked();
            const bool need_x = tx.tracked();
            if (!need_w && !need_x) return;
            ConstMatMap Wm(tw.data(), g.cols, cout);
            if (g.pointwise()) {
                const long rows = g.N * g.rows_per_frame;
                ConstMatMap dY(dym.data(), rows, cout);
                if (need_w) {
                    ConstMatMap X(tx.data(), rows, g.C);
                    MatMap dW(tw.grad().data(), g.cols, cout);
                    dW.noalias() += X.transpose() * dY;
                }
                if (need_x) {
                    MatMap dX(tx.grad().data(), rows, g.C);
                    dX.noalias() += dY * Wm.transpose();
                }
                return;
            }
            const long fpc = frames_per_chunk(g);
            std::vector<double> M, dM;
            if (need_w) M.resize(static_cast<size_t>(fpc * g.rows_per_frame * g.cols));
            if (need_x) dM.resize(static_cast<size_t>(fpc * g.rows_per_frame * g.cols));
            for (long f0 = 0; f0 < g.N; f0 += fpc) {
                const long f1 = std::min(f0 + fpc, g.N);
                const long rows = (f1 - f0) * g.rows_per_frame;
                ConstMatMap dY(dym.data() + f0 * g.rows_per_frame * cout, rows, cout);
                if (need_w) {
                    patch_gather(g, tx.data(), nullptr, 0, f0, f1, M.data());
                    ConstMatMap Mm(M.data(), rows, g.cols);
                    MatMap dW(tw.grad().data(), g.cols, cout);
                    dW.noalias() += Mm.transpose() * dY;
                }
                if (need_x) {
                    MatMap dMm(dM.data(), rows, g.cols);
                    dMm.noalias() = dY * Wm.transpose();
                    patch_scatter(g, dM.data(), f0, f1, tx.grad().data());
                }
            }
        });
    }
    return y;
}

Tensor deconv_impl(const Tensor& z, const ConvParams& p, Act act, double slope, bool one_d,
                   const char* who) {
    LogicalInput in = one_d ? parse_1d(z, p.spec.in_channels, who)
                            : parse_2d(z, p.spec.in_channels, who);
    const long kh = one_d ? 1 : kernel_extent(p.spec, one_d, 0, who);
    const long kw = kernel_extent(p.spec, one_d, 1, who);
    const long cin = p.spec.in_channels;
    const long cout = p.spec.out_channels;
    const long s = p.spec.stride;
    // The big grid is the deconv OUTPUT; the conv it adjoins maps big -> z.
    ConvGeom g = make_geom(in.N, one_d ? 1 : in.H * s, in.W * s, cout, kh, kw, s);
    if (g.Ho != in.H || g.Wo != in.W)
        throw ShapeError(std::string(who) + ": inconsistent transpose geometry");
    if (p.weight.size() != g.cols * cin)
        throw ShapeError(std::string(who) + ": weight " + shape_str(p.weight.shape()) +
                         " does not match kernel geometry");

    Shape out_shape;
    if (one_d)
        out_shape = in.batched ? Shape{in.N, g.W, cout} : Shape{g.W, cout};
    else
        out_shape = in.batched ? Shape{in.N, g.H, g.W, cout} : Shape{g.H, g.W, cout};
    Tensor y = Tensor::zeros(out_shape);

    ConstMatMap Wm(p.weight.data(), g.cols, cin);
    const long y_elems = g.N * g.H * g.W * cout;

    if (g.pointwise()) {
        const long rows = g.N * g.rows_per_frame;
        ConstMatMap Z(z.data(), rows, cin);
        MatMap Y(y.data(), rows, cout);
        Y.noalias() = Z * Wm.transpose();
    } else {
        const long fpc = frames_per_chunk(g);
        std::vector<double> P(static_cast<size_t>(fpc * g.rows_per_frame * g.cols));
        for (long f0 = 0; f0 < g.N; f0 += fpc) {
            const long f1 = std::min(f0 + fpc, g.N);
            const long rows = (f1 - f0) * g.rows_per_frame;
            ConstMatMap Z(z.data() + f0 * g.rows_per_frame * cin, rows, cin);
            MatMap Pm(P.data(), rows, g.cols);
            Pm.noalias() = Z * Wm.transpose();
            patch_scatter(g, P.data(), f0, f1, y.data());
        }
    }
    bias_act_rows(y.data(), g.N * g.H * g.W, cout,
                  p.bias.defined() ? p.bias.data() : nullptr, act, slope);

    if (any_tracked({z, p.weight, p.bias})) {
        Tensor tz = z, tw = p.weight, tb = p.bias, ty = y;
        Tape::active()->record(y, [tz, tw, tb, ty, g, cin, cout, act, slope, y_elems]() mutable {
            const double* dy = ty.ptr()->grad.data();
            const double* yv = ty.data();
            if (tb.defined() && tb.tracked()) {
                auto& bg = tb.grad();
                for (long i = 0; i < y_elems; ++i) {
                    double d = dy[i];
                    if (act == Act::LRelu && yv[i] < 0) d *= slope;
                    bg[i % cout] += d;
                }
            }
            const bool need_w = tw.tracked();
            const bool need_z = tz.tracked();
            if (!need_w && !need_z) return;
            ConstMatMap Wm(tw.data(), g.cols, cin);
            const double* mask = act == Act::LRelu ? yv : nullptr;
            if (g.pointwise()) {
                const long rows = g.N * g.rows_per_frame;
                std::vector<double> dym;
                masked_grad(dy, yv, act, slope, rows * cout, dym);
                ConstMatMap dY(dym.data(), rows, cout);
                if (need_w) {
                    ConstMatMap Z(tz.data(), rows, cin);
                    MatMap dW(tw.grad().data(), g.cols, cin);
                    dW.noalias() += dY.transpose() * Z;
                }
                if (need_z) {
                    MatMap dZ(tz.grad().data(), rows, cin);
                    dZ.noalias() += dY * Wm;
                }
                return;
            }
            const long fpc = frames_per_chunk(g);
            std::vector<double> M(static_cast<size_t>(fpc * g.rows_per_frame * g.cols));
            for (long f0 = 0; f0 < g.N; f0 += fpc) {
                const long f1 = std::min(f0 + fpc, g.N);
                const long rows = (f1 - f0) * g.rows_per_frame;
                patch_gather(g, dy, mask, slope, f0, f1, M.data());
                ConstMatMap Mm(M.data(), rows, g.cols);
                if (need_w) {
                    ConstMatMap Z(tz.data() + f0 * g.rows_per_frame * cin, rows, cin);
                    MatMap dW(tw.grad().data(), g.cols, cin);
                    dW.noalias() += Mm.transpose() * Z;
                }
                if (need_z) {
                    MatMap dZ(tz.grad().data() + f0 * g.rows_per_frame * cin, rows, cin);
                    dZ.noalias() += Mm * Wm;
                }
            }
        });
    }
    return y;
}

} // namespace

Geometry same_ceil(long in, long kernel, long stride) {
    if (in < 1 || kernel < 1 || stride < 1)
        throw ShapeError("same_ceil: extents must be positive (in=" + std::to_string(in) +
                         " kernel=" + std::to_string(kernel) + " stride=" +
                         std::to_string(stride) + ")");
    const long out = (in + stride - 1) / stride;
    const long pad = std::max((out - 1) * stride + kernel - in, 0L);
    if (kernel > in + pad)
        throw ShapeError("same_ceil: kernel " + std::to_string(kernel) +
                         " exceeds padded input " + std::to_string(in + pad));
    return {out, pad / 2};
}

Tensor conv2d(const Tensor& x, const ConvParams& p, Act act, double slope) {
    return conv_impl(x, p, act, slope, false, "conv2d");
}
Tensor conv1d(const Tensor& x, const ConvParams& p, Act act, double slope) {
    return conv_impl(x, p, act, slope, true, "conv1d");
}
Tensor deconv2d(const Tensor& x, const ConvParams& p, Act act, double slope) {
    return deconv_impl(x, p, act, slope, false, "deconv2d");
}
Tensor deconv1d(const Tensor& x, const ConvParams& p, Act act, double slope) {
    return deconv_impl(x, p, act, slope, true, "deconv1d");
}

Tensor maxpool1d(const Tensor& x, long window, long stride) {
    LogicalInput in = parse_1d(x, x.dim(x.rank() - 1), "maxpool1d");
    const long L = in.W, C = in.C;
    if (window < 1 || stride < 1) throw ShapeError("maxpool1d: window/stride must be positive");
    if (window > L)
        throw ShapeError("maxpool1d: window " + std::to_string(window) + " exceeds length " +
                         std::to_string(L));
    const long Lo = L / stride;
    Shape out_shape = in.batched ? Shape{in.N, Lo, C} : Shape{Lo, C};
    Tensor y = Tensor::zeros(out_shape);
    std::vector<long> arg(static_cast<size_t>(in.N * Lo * C));
    const double* px = x.data();
    double* py = y.data();
    for (long n = 0; n < in.N; ++n)
        for (long o = 0; o < Lo; ++o)
            for (long c = 0; c < C; ++c) {
                const long j0 = o * stride;
                const long j1 = std::min(j0 + window, L);
                long best = j0;
                double bv = px[(n * L + j0) * C + c];
                for (long j = j0 + 1; j < j1; ++j) {
                    double v = px[(n * L + j) * C + c];
                    if (v > bv) { bv = v; best = j; } // first max wins ties
                }
                py[(n * Lo + o) * C + c] = bv;
                arg[(n * Lo + o) * C + c] = (n * L + best) * C + c;
            }
    if (any_tracked({x})) {
        Tensor tx = x, ty = y;
        Tape::active()->record(y, [tx, ty, arg = std::move(arg)]() mutable {
            if (!tx.tracked()) return;
            const auto& og = ty.ptr()->grad;
            auto& g = tx.grad();
            for (size_t i = 0; i < arg.size(); ++i) g[arg[i]] += og[i];
        });
    }
    return y;
}

Tensor upsample1d(const Tensor& x, long factor) {
    if (factor < 1) throw ShapeError("upsample1d: factor must be >= 1");
    LogicalInput in = parse_1d(x, x.dim(x.rank() - 1), "upsample1d");
    const long L = in.W, C = in.C;
    Shape out_shape = in.batched ? Shape{in.N, L * factor, C} : Shape{L * factor, C};
    Tensor y = Tensor::zeros(out_shape);
    const double* px = x.data();
    double* py = y.data();
    for (long n = 0; n < in.N; ++n)
        for (long i = 0; i < L * factor; ++i)
            std::copy(px + (n * L + i / factor) * C, px + (n * L + i / factor + 1) * C,
                      py + (n * L * factor + i) * C);
    if (any_tracked({x})) {
        Tensor tx = x, ty = y;
        const long N = in.N;
        Tape::active()->record(y, [tx, ty, N, L, C, factor]() mutable {
            if (!tx.tracked()) return;
            const auto& og = ty.ptr()->grad;
            auto& g = tx.grad();
            for (long n = 0; n < N; ++n)
                for (long i = 0; i < L * factor; ++i)
                    for (long c = 0; c < C; ++c)
                        g[(n * L + i / factor) * C + c] += og[(n * L * factor + i) * C + c];
        });
    }
    return y;
}

Tensor upsample2d(const Tensor& x, long factor) {
    if (factor < 1) throw ShapeError("upsample2d: factor must be >= 1");
    LogicalInput in = parse_2d(x, x.dim(x.rank() - 1), "upsample2d");
    const long H = in.H, W = in.W, C = in.C, f = factor;
    Shape out_shape = in.batched ? Shape{in.N, H * f, W * f, C} : Shape{H * f, W * f, C};
    Tensor y = Tensor::zeros(out_shape);
    const double* px = x.data();
    double* py = y.data();
    for (long n = 0; n < in.N; ++n)
        for (long i = 0; i < H * f; ++i)
            for (long j = 0; j < W * f; ++j)
                std::copy(px + ((n * H + i / f) * W + j / f) * C,
                          px + ((n * H + i / f) * W + j / f + 1) * C,
                          py + ((n * H * f + i) * W * f + j) * C);
    if (any_tracked({x})) {
        Tensor tx = x, ty = y;
        const long N = in.N;
        Tape::active()->record(y, [tx, ty, N, H, W, C, f]() mutable {
            if (!tx.tracked()) return;
            const auto& og = ty.ptr()->grad;
            auto& g = tx.grad();
            for (long n = 0; n < N; ++n)
                for (long i = 0; i < H * f; ++i)
                    for (long j = 0; j < W * f; ++j)
                        for (long c = 0; c < C; ++c)
                            g[((n * H + i / f) * W + j / f) * C + c] +=
                                og[((n * H * f + i) * W * f + j) * C + c];
        });
    }
    return y;
}

Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b, Act act, double slope) {
    if (W.rank() != 2) throw ShapeError("linear: weight must be rank 2, got " +
                                        shape_str(W.shape()));
    const long m = W.dim(0), n = W.dim(1);
    const bool batched = x.rank() == 2;
    if (x.rank() > 2 || x.dim(x.rank() - 1) != n)
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(W.shape()));
    if (b.defined() && b.size() != m)
        throw ShapeError("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(W.shape()));
    const long rows = batched ? x.dim(0) : 1;
    Tensor y = Tensor::zeros(batched ? Shape{rows, m} : Shape{m});
    {
        ConstMatMap X(x.data(), rows, n);
        ConstMatMap Wm(W.data(), m, n);
        MatMap Y(y.data(), rows, m);
        Y.noalias() = X * Wm.transpose();
    }
    bias_act_rows(y.data(), rows, m, b.defined() ? b.data() : nullptr, act, slope);
    if (any_tracked({x, W, b})) {
        Tensor tx = x, tw = W, tb = b, ty = y;
        Tape::active()->record(y, [tx, tw, tb, ty, rows, m, n, act, slope]() mutable {
            std::vector<double> dym;
            masked_grad(ty.ptr()->grad.data(), ty.data(), act, slope, rows * m, dym);
            ConstMatMap dY(dym.data(), rows, m);
            if (tb.defined() && tb.tracked()) {
                auto& bg = tb.grad();
                for (long r = 0; r < rows; ++r)
                    for (long c = 0; c < m; ++c) bg[c] += dym[r * m + c];
            }
            if (tw.tracked()) {
                ConstMatMap X(tx.data(), rows, n);
                MatMap dW(tw.grad().data(), m, n);
                dW.noalias() += dY.transpose() * X;
            }
            if (tx.tracked()) {
                ConstMatMap Wm(tw.data(), m, n);
                MatMap dX(tx.grad().data(), rows, n);
                dX.noalias() += dY * Wm;
            }
        });
    }
    return y;
}

Tensor add_lrelu(const Tensor& a, const Tensor& b, double slope) {
    if (!shapes_equal(a.shape(), b.shape()))
        throw ShapeError("add_lrelu: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const long n = a.size();
    std::vector<double> out(static_cast<size_t>(n));
    const double* pa = a.data();
    const double* pb = b.data();
    for (long i = 0; i < n; ++i) {
        double v = pa[i] + pb[i];
        out[i] = v >= 0 ? v : slope * v;
    }
    Tensor y = Tensor::from(a.shape(), std::move(out));
    if (any_tracked({a, b})) {
        Tensor ta = a, tb = b, ty = y;
        Tape::active()->record(y, [ta, tb, ty, n, slope]() mutable {
            const auto& og = ty.ptr()->grad;
            const double* py = ty.data();
            for (long i = 0; i < n; ++i) {
                const double d = og[i] * (py[i] >= 0 ? 1.0 : slope);
                if (ta.tracked()) ta.grad()[i] += d;
                if (tb.tracked()) tb.grad()[i] += d;
            }
        });
    }
    return y;
}

LstmState lstm_cell(const Tensor& x, const LstmState& prev, const LstmLayerParams& p) {
    if (x.rank() != 2 || x.dim(1) != p.input_size)
        throw ShapeError("lstm_cell: input " + shape_str(x.shape()) + " does not match size " +
                         std::to_string(p.input_size));
    const long B = x.dim(0);
    const long H = p.hidden_size;
    const long in = p.input_size;
    if (prev.h.shape() != Shape{B, H} || prev.c.shape() != Shape{B, H})
        throw ShapeError("lstm_cell: state shape mismatch, h=" + shape_str(prev.h.shape()) +
                         " c=" + shape_str(prev.c.shape()));
    if (p.W.shape() != Shape{4 * H, in + H} || p.b.size() != 4 * H)
        throw ShapeError("lstm_cell: parameter shapes W=" + shape_str(p.W.shape()) + " b=" +
                         shape_str(p.b.shape()) + " do not match sizes");

    // Gate pre-activations for all four gates in one product.
    std::vector<double> Z(static_cast<size_t>(B * (in + H)));
    for (long r = 0; r < B; ++r) {
        std::copy(x.data() + r * in, x.data() + (r + 1) * in, Z.begin() + r * (in + H));
        std::copy(prev.h.data() + r * H, prev.h.data() + (r + 1) * H,
                  Z.begin() + r * (in + H) + in);
    }
    std::vector<double> G(static_cast<size_t>(B * 4 * H));
    {
        ConstMatMap Zm(Z.data(), B, in + H);
        ConstMatMap Wm(p.W.data(), 4 * H, in + H);
        MatMap Gm(G.data(), B, 4 * H);
        Gm.noalias() = Zm * Wm.transpose();
        for (long r = 0; r < B; ++r)
            for (long j = 0; j < 4 * H; ++j) G[r * 4 * H + j] += p.b.data()[j];
    }

    struct Stash {
        std::vector<double> i, f, g, o, tc, dc;
    };
    auto st = std::make_shared<Stash>();
    st->i.resize(B * H); st->f.resize(B * H); st->g.resize(B * H); st->o.resize(B * H);
    st->tc.resize(B * H);

    Tensor c_new = Tensor::zeros({B, H});
    Tensor h_new = Tensor::zeros({B, H});
    auto sig = [](double v) {
        return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    };
    for (long r = 0; r < B; ++r)
        for (long j = 0; j < H; ++j) {
            const long k = r * H + j;
            const double* gr = G.data() + r * 4 * H;
            st->i[k] = sig(gr[j]);
            st->f[k] = sig(gr[H + j]);
            st->g[k] = std::tanh(gr[2 * H + j]);
            st->o[k] = sig(gr[3 * H + j]);
            const double c = st->f[k] * prev.c.data()[k] + st->i[k] * st->g[k];
            c_new.data()[k] = c;
            st->tc[k] = std::tanh(c);
            h_new.data()[k] = st->o[k] * st->tc[k];
        }

    if (any_tracked({x, prev.h, prev.c, p.W, p.b})) {
        Tensor tx = x, th = prev.h, tc_prev = prev.c, tw = p.W, tb = p.b;
        Tensor tcn = c_new, thn = h_new;
        // h-node carries the whole cell backward; it runs after the c-node
        // below has stashed dc (reverse order), and the c-node forces the
        // h-node to fire even when only c feeds the loss.
        Tape::active()->record(h_new, [tx, th, tc_prev, tw, tb, tcn, thn, st, B, H,
                                       in]() mutable {
            const auto& dh = thn.ptr()->grad;
            const bool have_dc = !st->dc.empty();
            std::vector<double> dz(static_cast<size_t>(B * 4 * H));
            std::vector<double> dc_total(static_cast<size_t>(B * H));
            for (long k = 0; k < B * H; ++k) {
                const double dhk = dh[k];
                double dck = dhk * st->o[k] * (1.0 - st->tc[k] * st->tc[k]);
                if (have_dc) dck += st->dc[k];
                dc_total[k] = dck;
                const double dok = dhk * st->tc[k];
                const double dik = dck * st->g[k];
                const double dfk = dck * tc_prev.data()[k];
                const double dgk = dck * st->i[k];
                const long r = k / H, j = k % H;
                double* dzr = dz.data() + r * 4 * H;
                dzr[j] = dik * st->i[k] * (1.0 - st->i[k]);
                dzr[H + j] = dfk * st->f[k] * (1.0 - st->f[k]);
                dzr[2 * H + j] = dgk * (1.0 - st->g[k] * st->g[k]);
                dzr[3 * H + j] = dok * st->o[k] * (1.0 - st->o[k]);
            }
            if (tc_prev.tracked()) {
                auto& g = tc_prev.grad();
                for (long k = 0; k < B * H; ++k) g[k] += dc_total[k] * st->f[k];
            }
            if (tb.tracked()) {
                auto& g = tb.grad();
                for (long r = 0; r < B; ++r)
                    for (long j = 0; j < 4 * H; ++j) g[j] += dz[r * 4 * H + j];
            }
            if (tw.tracked()) {
                std::vector<double> Z(static_cast<size_t>(B * (in + H)));
                for (long r = 0; r < B; ++r) {
                    std::copy(tx.data() + r * in, tx.data() + (r + 1) * in,
                              Z.begin() + r * (in + H));
                    std::copy(th.data() + r * H, th.data() + (r + 1) * H,
                              Z.begin() + r * (in + H) + in);
                }
                ConstMatMap Zm(Z.data(), B, in + H);
                ConstMatMap dZm(dz.data(), B, 4 * H);
                MatMap dW(tw.grad().data(), 4 * H, in + H);
                dW.noalias() += dZm.transpose() * Zm;
            }
            if (tx.tracked() || th.tracked()) {
                std::vector<double> dZ(static_cast<size_t>(B * (in + H)));
                ConstMatMap dzm(dz.data(), B, 4 * H);
                ConstMatMap Wm(tw.data(), 4 * H, in + H);
                MatMap dZm(dZ.data(), B, in + H);
                dZm.noalias() = dzm * Wm;
                if (tx.tracked()) {
                    auto& g = tx.grad();
                    for (long r = 0; r < B; ++r)
                        for (long j = 0; j < in; ++j) g[r * in + j] += dZ[r * (in + H) + j];
                }
                if (th.tracked()) {
                    auto& g = th.grad();
                    for (long r = 0; r < B; ++r)
                        for (long j = 0; j < H; ++j) g[r * H + j] += dZ[r * (in + H) + in + j];
                }
            }
        });
        Tensor thn2 = h_new;
        Tape::active()->record(c_new, [tcn, thn2, st]() mutable {
            st->dc = tcn.ptr()->grad;
            thn2.grad(); // ensure the h-node fires
        });
    }
    return {h_new, c_new};
}

Tensor uniform_init(Shape shape, double fan_in, std::mt19937_64& rng) {
    const double bound = std::sqrt(1.0 / std::max(fan_in, 1.0));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> v(static_cast<size_t>(numel(shape)));
    for (auto& x : v) x = u(rng);
    return Tensor::param(std::move(shape), std::move(v));
}

namespace {
Tensor zero_param(Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    t.set_requires_grad(true);
    return t;
}
} // namespace

ConvParams make_conv2d(long kernel, long stride, long cin, long cout, std::mt19937_64& rng) {
    ConvParams p;
    p.spec = {Shape{kernel, kernel}, stride, cin, cout, true};
    p.weight = uniform_init({kernel * kernel * cin, cout},
                            static_cast<double>(kernel * kernel * cin), rng);
    p.bias = zero_param({cout});
    return p;
}

ConvParams make_deconv2d(long kernel, long stride, long cin, long cout, std::mt19937_64& rng) {
    ConvParams p;
    p.spec = {Shape{kernel, kernel}, stride, cin, cout, true};
    // Each output cell hears ~k^2/s^2 patches of cin channels.
    const double fan_in = std::max(1.0, static_cast<double>(kernel * kernel * cin) /
                                            static_cast<double>(stride * stride));
    p.weight = uniform_init({kernel * kernel * cout, cin}, fan_in, rng);
    p.bias = zero_param({cout});
    return p;
}

ConvParams make_conv1d(long kernel, long stride, long cin, long cout, std::mt19937_64& rng) {
    ConvParams p;
    p.spec = {Shape{kernel}, stride, cin, cout, true};
    p.weight = uniform_init({kernel * cin, cout}, static_cast<double>(kernel * cin), rng);
    p.bias = zero_param({cout});
    return p;
}

ConvParams make_deconv1d(long kernel, long stride, long cin, long cout, std::mt19937_64& rng) {
    ConvParams p;
    p.spec = {Shape{kernel}, stride, cin, cout, true};
    const double fan_in = std::max(1.0, static_cast<double>(kernel * cin) /
                                            static_cast<double>(stride));
    p.weight = uniform_init({kernel * cout, cin}, fan_in, rng);
    p.bias = zero_param({cout});
    return p;
}

LstmLayerParams make_lstm(long input, long hidden, std::mt19937_64& rng) {
    LstmLayerParams p;
    p.input_size = input;
    p.hidden_size = hidden;
    p.W = uniform_init({4 * hidden, input + hidden}, static_cast<double>(input + hidden), rng);
    p.b = zero_param({4 * hidden});
    return p;
}

std::pair<Tensor, Tensor> make_linear(long out, long in, std::mt19937_64& rng) {
    return {uniform_init({out, in}, static_cast<double>(in), rng), zero_param({out})};
}

} // namespace affect
