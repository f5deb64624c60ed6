#ifndef AFFECT_NN_HPP
#define AFFECT_NN_HPP

#include <random>
#include <utility>

#include "affect/tensor.hpp"

namespace affect {

// Same-ceil padding: output extent = ceil(input / stride); the shortfall
// (out-1)*stride + kernel - input is split with the extra cell on the right.
struct Geometry {
    long out = 0;
    long pad_before = 0;
};
Geometry same_ceil(long in, long kernel, long stride);

enum class Act { None, LRelu };

struct ConvSpec {
    Shape kernel;            // {k} for 1D, {kh, kw} for 2D
    long stride = 1;
    long in_channels = 1;
    long out_channels = 1;
    bool bias = true;
};

// weight layout: conv [k*k*in, out]; deconv [k*k*out, in] (the kernel of the
// strided conv whose adjoint the deconv is, so <conv(x,W),z> == <x,deconv(z,W)>).
struct ConvParams {
    ConvSpec spec;
    Tensor weight;
    Tensor bias;             // undefined when spec.bias is false
};

// Images and audio are channels-last: {N,H,W,C} / {H,W,C}; {N,L,C} / {L,C}.
// Activation is fused into the layer node; backward reads the mask off the
// stored output, which is exact because slope > 0 preserves sign.
Tensor conv2d(const Tensor& x, const ConvParams& p, Act act = Act::None, double slope = 0.2);
Tensor deconv2d(const Tensor& x, const ConvParams& p, Act act = Act::None, double slope = 0.2);
Tensor conv1d(const Tensor& x, const ConvParams& p, Act act = Act::None, double slope = 0.2);
Tensor deconv1d(const Tensor& x, const ConvParams& p, Act act = Act::None, double slope = 0.2);

// Per-channel window max; gradient routes to the first argmax in each window.
Tensor maxpool1d(const Tensor& x, long window, long stride);
// Nearest-neighbor repetition; backward sums over repeats.
Tensor upsample1d(const Tensor& x, long factor);
Tensor upsample2d(const Tensor& x, long factor);

// y = x W^T + b over rows; x is {N,n} or {n}, W is {m,n}, b is {m}.
Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b, Act act = Act::None,
              double slope = 0.2);

// lrelu(a + b): the residual join, one tape node.
Tensor add_lrelu(const Tensor& a, const Tensor& b, double slope);

// Gate order i, f, g, o packed along the first axis of W [4H, in+H], b [4H].
struct LstmLayerParams {
    long input_size = 0;
    long hidden_size = 0;
    Tensor W;
    Tensor b;
};

struct LstmState {
    Tensor h;
    Tensor c;
};

// One gated step over a batch: x {B,in}, state {B,H} each.
// i,f,o = sigmoid, g = tanh, c' = f*c + i*g, h' = o*tanh(c').
LstmState lstm_cell(const Tensor& x, const LstmState& prev, const LstmLayerParams& p);

// U(-bound, bound) with bound = sqrt(1/fan_in); biases stay zero.
Tensor uniform_init(Shape shape, double fan_in, std::mt19937_64& rng);

ConvParams make_conv2d(long kernel, long stride, long cin, long cout, std::mt19937_64& rng);
ConvParams make_deconv2d(long kernel, long stride, long cin, long cout, std::mt19937_64& rng);
ConvParams make_conv1d(long kernel, long stride, long cin, long cout, std::mt19937_64& rng);
ConvParams make_deconv1d(long kernel, long stride, long cin, long cout, std::mt19937_64& rng);
LstmLayerParams make_lstm(long input, long hidden, std::mt19937_64& rng);
// Returns {W, b} for a linear layer out x in.
std::pair<Tensor, Tensor> make_linear(long out, long in, std::mt19937_64& rng);

} // namespace affect

#endif
