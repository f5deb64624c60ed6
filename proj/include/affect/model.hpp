#ifndef AFFECT_MODEL_HPP
#define AFFECT_MODEL_HPP

#include <string>
#include <utility>
#include <vector>

#include "affect/data.hpp"
#include "affect/nn.hpp"

namespace affect {

// Architecture widths. The full-size preset follows the published layer
// tables; the smaller presets keep identical wiring at reduced width so
// training fits a desktop budget.
struct ModelConfig {
    long block1_mid = 8;           // 2D encoder block 1: 1x1 / 3x3 channels
    long block1_out = 16;
    long block2_mid = 16;
    long block2_out = 32;
    long latent2d = 2048;
    long audio_channels = 40;
    long bottleneck1d = 640;       // FC bottleneck inside the 1D AE
    long decoder1d_channels = 4;   // 1D decoder reshape target {L/pool1, c}
    long lstm_hidden = 512;
    double slope = 0.2;            // LReLU slope everywhere

    // Input geometry. The full-size presets consume real recordings; tiny()
    // shrinks the same wiring onto 4x4 images and 16-sample audio so the
    // end-to-end finite-difference check stays well conditioned.
    long image_size = kImageH;     // square side; halved by each of two blocks
    long audio_len = kAudioLen;
    long audio_kernel1 = 20;
    long audio_kernel2 = 40;
    long audio_pool1 = 2;
    long audio_pool2 = 10;

    bool use_visual = true;
    bool use_audio = true;
    bool use_decoders = true;
    bool feedback_predictions = false; // append previous (a,v) to LSTM input

    long image_side() const { return image_size / 4; }  // two stride-2 blocks
    long image_flat() const { return image_side() * image_side() * block2_out; }
    long audio_tap() const {
        return audio_len / (audio_pool1 * audio_pool2) * audio_channels;
    }
    long fused_dim() const {
        return (use_visual ? latent2d : 0) + (use_audio ? audio_tap() : 0);
    }
    long lstm_input() const { return fused_dim() + (feedback_predictions ? 2 : 0); }

    static ModelConfig paper();
    static ModelConfig slim();
    static ModelConfig tiny();
};

// Three stacked convolutions plus a projection shortcut; the shortcut joins
// before the block-final activation.
struct ResidualBlockParams {
    ConvParams in1x1, mid, out1x1, shortcut;
};

struct ModelParams {
    ModelConfig config;

    ResidualBlockParams enc2d_block1, enc2d_block2;
    Tensor enc2d_fc_w, enc2d_fc_b;          // image_flat -> latent2d

    Tensor dec2d_fc_w, dec2d_fc_b;          // latent2d -> image_flat
    ResidualBlockParams dec2d_block1, dec2d_block2;

    ConvParams enc1d_conv1, enc1d_conv2;
    Tensor enc1d_fc_w, enc1d_fc_b;          // audio_tap -> bottleneck

    Tensor dec1d_fc_w, dec1d_fc_b;          // bottleneck -> 320*decoder1d_channels
    ConvParams dec1d_deconv1, dec1d_deconv2;

    LstmLayerParams lstm1, lstm2;
    Tensor head_w, head_b;                  // lstm_hidden -> 2
};

// Deterministic per seed; groups disabled by the config are left undefined.
ModelParams make_model(const ModelConfig& cfg, uint64_t seed);

struct NamedParam {
    std::string name;   // group-dotted, e.g. "enc2d.block1.mid.weight"
    Tensor tensor;
};
std::vector<NamedParam> named_parameters(const ModelParams& p);
std::vector<Tensor> parameters(const ModelParams& p);
long parameter_count(const ModelParams& p);

// Staged outputs so shape conformance is inspectable from outside.
struct Enc2dOut {
    Tensor block1;     // {N, 48, 48, block1_out}
    Tensor block2;     // {N, 24, 24, block2_out}
    Tensor latent;     // {N, latent2d}
};
struct Enc1dOut {
    Tensor conv1;      // {N, 640, C}
    Tensor pool1;      // {N, 320, C}
    Tensor conv2;      // {N, 320, C}
    Tensor pool2;      // {N, 32, C}
    Tensor features;   // {N, audio_tap} — the fusion tap
    Tensor bottleneck; // {N, bottleneck1d}
};

Enc2dOut encode2d(const Tensor& images, const ModelParams& p);
Tensor decode2d(const Tensor& latent, const ModelParams& p);      // {N,96,96,3}
Enc1dOut encode1d(const Tensor& audio, const ModelParams& p);
Tensor decode1d(const Tensor& bottleneck, const ModelParams& p);  // {N,640,1}

// Concatenation, visual features first; an undefined side passes through.
Tensor fuse(const Tensor& latent2d, const Tensor& latent1d);

struct Forward {
    Tensor latent2d;   // {N, latent2d}     (undefined without the visual path)
    Tensor latent1d;   // {N, audio_tap}    (undefined without the audio path)
    Tensor fused;      // {N, fused_dim}
    Tensor recon2d;    // {N, 96,96,3}      (undefined without decoders)
    Tensor recon1d;    // {N, 640,1}
    Tensor pred;       // {B, 2}
};
// N = batch.batch * batch.steps; the LSTM starts from zero state per window.
Forward forward_batch(const Batch& batch, const ModelParams& p);

// (arousal, valence) for a single window.
std::pair<double, double> predict_window(const Window& w, const ModelParams& p);

// Concordance correlation: 2*cov / (var_x + var_y + (mean_x - mean_y)^2),
// population statistics. A zero denominator yields the constant 0 and bumps
// the degenerate counter.
Tensor ccc(const Tensor& x, const Tensor& y);
double ccc_value(const std::vector<double>& x, const std::vector<double>& y);
long ccc_degenerate_count();
void reset_ccc_degenerate_count();

// 1 - 0.5 * (ccc_arousal + ccc_valence) over the batch series.
Tensor loss_rec(const Tensor& pred, const Tensor& labels);

// Batch sum of squared l2 reconstruction error.
Tensor loss_recon(const Tensor& recon, const Tensor& target);

struct LossWeights {
    double alpha = 1.0, beta = 1.0, gamma = 0.01;
};
struct LossBreakdown {
    Tensor total, l2d, l1d, lrec;
};
// alpha*l2d + beta*l1d + gamma*lrec.
Tensor combine_loss(const Tensor& l2d, const Tensor& l1d, const Tensor& lrec,
                    const LossWeights& w);
LossBreakdown total_loss(const Forward& f, const Batch& batch, const LossWeights& w);

} // namespace affect

#endif
