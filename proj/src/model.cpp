#include "affect/model.hpp"

#include <atomic>
#include <cmath>
#include <functional>

namespace affect {

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::slim() {
    ModelConfig c;
    c.block1_mid = 4;
    c.block1_out = 8;
    c.block2_mid = 8;
    c.block2_out = 16;
    c.latent2d = 512;
    c.audio_channels = 16;
    c.bottleneck1d = 256;
    c.decoder1d_channels = 2;
    c.lstm_hidden = 128;
    return c;
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.block1_mid = 2;
    c.block1_out = 2;
    c.block2_mid = 2;
    c.block2_out = 2;
    c.latent2d = 8;
    c.audio_channels = 2;
    c.bottleneck1d = 8;
    c.decoder1d_channels = 1;
    c.lstm_hidden = 6;
    c.image_size = 4;
    c.audio_len = 16;
    c.audio_kernel1 = 3;
    c.audio_kernel2 = 3;
    c.audio_pool1 = 2;
    c.audio_pool2 = 2;
    return c;
}

ModelParams make_model(const ModelConfig& cfg, uint64_t seed) {
    std::mt19937_64 rng(seed);
    ModelParams p;
    p.config = cfg;
    if (cfg.use_visual) {
        p.enc2d_block1.in1x1 = make_conv2d(1, 1, kImageC, cfg.block1_mid, rng);
        p.enc2d_block1.mid = make_conv2d(3, 2, cfg.block1_mid, cfg.block1_mid, rng);
        p.enc2d_block1.out1x1 = make_conv2d(1, 1, cfg.block1_mid, cfg.block1_out, rng);
        p.enc2d_block1.shortcut = make_conv2d(1, 2, kImageC, cfg.block1_out, rng);
        p.enc2d_block2.in1x1 = make_conv2d(1, 1, cfg.block1_out, cfg.block2_mid, rng);
        p.enc2d_block2.mid = make_conv2d(3, 2, cfg.block2_mid, cfg.block2_mid, rng);
        p.enc2d_block2.out1x1 = make_conv2d(1, 1, cfg.block2_mid, cfg.block2_out, rng);
        p.enc2d_block2.shortcut = make_conv2d(1, 2, cfg.block1_out, cfg.block2_out, rng);
        std::tie(p.enc2d_fc_w, p.enc2d_fc_b) = make_linear(cfg.latent2d, cfg.image_flat(), rng);
        if (cfg.use_decoders) {
            std::tie(p.dec2d_fc_w, p.dec2d_fc_b) =
                make_linear(cfg.image_flat(), cfg.latent2d, rng);
            p.dec2d_block1.in1x1 = make_deconv2d(1, 1, cfg.block2_out, cfg.block2_mid, rng);
            p.dec2d_block1.mid = make_deconv2d(3, 2, cfg.block2_mid, cfg.block2_mid, rng);
            p.dec2d_block1.out1x1 = make_deconv2d(1, 1, cfg.block2_mid, cfg.block1_out, rng);
            p.dec2d_block1.shortcut = make_conv2d(1, 1, cfg.block2_out, cfg.block1_out, rng);
            p.dec2d_block2.in1x1 = make_deconv2d(1, 1, cfg.block1_out, cfg.block1_mid, rng);
            p.dec2d_block2.mid = make_deconv2d(3, 2, cfg.block1_mid, cfg.block1_mid, rng);
            p.dec2d_block2.out1x1 = make_deconv2d(1, 1, cfg.block1_mid, kImageC, rng);
            p.dec2d_block2.shortcut = make_conv2d(1, 1, cfg.block1_out, kImageC, rng);
        }
    }
    if (cfg.use_audio) {
        p.enc1d_conv1 = make_conv1d(cfg.audio_kernel1, 1, 1, cfg.audio_channels, rng);
        p.enc1d_conv2 =
            make_conv1d(cfg.audio_kernel2, 1, cfg.audio_channels, cfg.audio_channels, rng);
        std::tie(p.enc1d_fc_w, p.enc1d_fc_b) =
            make_linear(cfg.bottleneck1d, cfg.audio_tap(), rng);
        if (cfg.use_decoders) {
            std::tie(p.dec1d_fc_w, p.dec1d_fc_b) = make_linear(
                cfg.audio_len / cfg.audio_pool1 * cfg.decoder1d_channels,
                cfg.bottleneck1d, rng);
            p.dec1d_deconv1 = make_deconv1d(cfg.audio_kernel1, 1,
                                            cfg.decoder1d_channels, cfg.audio_channels, rng);
            p.dec1d_deconv2 = make_deconv1d(cfg.audio_kernel2, 1, cfg.audio_channels, 1, rng);
        }
    }
    p.lstm1 = make_lstm(cfg.lstm_input(), cfg.lstm_hidden, rng);
    p.lstm2 = make_lstm(cfg.lstm_hidden, cfg.lstm_hidden, rng);
    std::tie(p.head_w, p.head_b) = make_linear(2, cfg.lstm_hidden, rng);
    return p;
}

namespace {

void push_conv(std::vector<NamedParam>& out, const std::string& name, const ConvParams& c) {
    if (!c.weight.defined()) return;
    out.push_back({name + ".weight", c.weight});
    if (c.bias.defined()) out.push_back({name + ".bias", c.bias});
}

void push_pair(std::vector<NamedParam>& out, const std::string& name, const Tensor& w,
               const Tensor& b) {
    if (!w.defined()) return;
    out.push_back({name + ".weight", w});
    if (b.defined()) out.push_back({name + ".bias", b});
}

void push_block(std::vector<NamedParam>& out, const std::string& name,
                const ResidualBlockParams& bp) {
    push_conv(out, name + ".in1x1", bp.in1x1);
    push_conv(out, name + ".mid", bp.mid);
    push_conv(out, name + ".out1x1", bp.out1x1);
    push_conv(out, name + ".shortcut", bp.shortcut);
}

} // namespace

std::vector<NamedParam> named_parameters(const ModelParams& p) {
    std::vector<NamedParam> out;
    push_block(out, "enc2d.block1", p.enc2d_block1);
    push_block(out, "enc2d.block2", p.enc2d_block2);
    push_pair(out, "enc2d.fc", p.enc2d_fc_w, p.enc2d_fc_b);
    push_pair(out, "dec2d.fc", p.dec2d_fc_w, p.dec2d_fc_b);
    push_block(out, "dec2d.block1", p.dec2d_block1);
    push_block(out, "dec2d.block2", p.dec2d_block2);
    push_conv(out, "enc1d.conv1", p.enc1d_conv1);
    push_conv(out, "enc1d.conv2", p.enc1d_conv2);
    push_pair(out, "enc1d.fc", p.enc1d_fc_w, p.enc1d_fc_b);
    push_pair(out, "dec1d.fc", p.dec1d_fc_w, p.dec1d_fc_b);
    push_conv(out, "dec1d.deconv1", p.dec1d_deconv1);
    push_conv(out, "dec1d.deconv2", p.dec1d_deconv2);
    push_pair(out, "lstm.layer1", p.lstm1.W, p.lstm1.b);
    push_pair(out, "lstm.layer2", p.lstm2.W, p.lstm2.b);
    push_pair(out, "head", p.head_w, p.head_b);
    return out;
}

std::vector<Tensor> parameters(const ModelParams& p) {
    std::vector<Tensor> out;
    for (auto& np : named_parameters(p)) out.push_back(np.tensor);
    return out;
}

long parameter_count(const ModelParams& p) {
    long n = 0;
    for (auto& np : named_parameters(p)) n += np.tensor.size();
    return n;
}

namespace {

Tensor residual_down(const Tensor& x, const ResidualBlockParams& bp, double slope) {
    Tensor y = conv2d(x, bp.in1x1, Act::LRelu, slope);
    y = conv2d(y, bp.mid, Act::LRelu, slope);
    y = conv2d(y, bp.out1x1, Act::None);
    Tensor s = conv2d(x, bp.shortcut, Act::None);
    return add_lrelu(y, s, slope);
}

// The shortcut upsamples by repetition and projects; `activate` is off for
// the block that emits pixels.
Tensor residual_up(const Tensor& x, const ResidualBlockParams& bp, double slope,
                   bool activate) {
    Tensor y = deconv2d(x, bp.in1x1, Act::LRelu, slope);
    y = deconv2d(y, bp.mid, Act::LRelu, slope);
    y = deconv2d(y, bp.out1x1, Act::None);
    Tensor s = conv2d(upsample2d(x, 2), bp.shortcut, Act::None);
    return activate ? add_lrelu(y, s, slope) : ops::add(y, s);
}

} // namespace

Enc2dOut encode2d(const Tensor& images, const ModelParams& p) {
    const ModelConfig& cfg = p.config;
    if (!p.enc2d_fc_w.defined())
        throw ConfigError("encode2d: the visual path is disabled in this configuration");
    Enc2dOut out;
    out.block1 = residual_down(images, p.enc2d_block1, cfg.slope);
    out.block2 = residual_down(out.block1, p.enc2d_block2, cfg.slope);
    const long n = out.block2.dim(0);
    Tensor flat = ops::reshape(out.block2, {n, cfg.image_flat()});
    out.latent = linear(flat, p.enc2d_fc_w, p.enc2d_fc_b, Act::LRelu, cfg.slope);
    return out;
}

Tensor decode2d(const Tensor& latent, const ModelParams& p) {
    const ModelConfig& cfg = p.config;
    if (!p.dec2d_fc_w.defined())
        throw ConfigError("decode2d: the visual decoder is disabled in this configuration");
    const long n = latent.dim(0);
    Tensor y = linear(latent, p.dec2d_fc_w, p.dec2d_fc_b, Act::LRelu, cfg.slope);
    y = ops::reshape(y, {n, cfg.image_side(), cfg.image_side(), cfg.block2_out});
    y = residual_up(y, p.dec2d_block1, cfg.slope, true);
    y = residual_up(y, p.dec2d_block2, cfg.slope, false);
    return y;
}

Enc1dOut encode1d(const Tensor& audio, const ModelParams& p) {
    const ModelConfig& cfg = p.config;
    if (!p.enc1d_fc_w.defined())
        throw ConfigError("encode1d: the audio path is disabled in this configuration");
    Enc1dOut o;
    o.conv1 = conv1d(audio, p.enc1d_conv1, Act::LRelu, cfg.slope);
    o.pool1 = maxpool1d(o.conv1, cfg.audio_pool1, cfg.audio_pool1);
    o.conv2 = conv1d(o.pool1, p.enc1d_conv2, Act::LRelu, cfg.slope);
    o.pool2 = maxpool1d(o.conv2, cfg.audio_pool2, cfg.audio_pool2);
    const long n = o.pool2.dim(0);
    o.features = ops::reshape(o.pool2, {n, cfg.audio_tap()});
    o.bottleneck = linear(o.features, p.enc1d_fc_w, p.enc1d_fc_b, Act::LRelu, cfg.slope);
    return o;
}

Tensor decode1d(const Tensor& bottleneck, const ModelParams& p) {
    const ModelConfig& cfg = p.config;
    if (!p.dec1d_fc_w.defined())
        throw ConfigError("decode1d: the audio decoder is disabled in this configuration");
    const long n = bottleneck.dim(0);
    Tensor y = linear(bottleneck, p.dec1d_fc_w, p.dec1d_fc_b, Act::LRelu, cfg.slope);
    y = ops::reshape(y, {n, cfg.audio_len / cfg.audio_pool1, cfg.decoder1d_channels});
    y = deconv1d(y, p.dec1d_deconv1, Act::LRelu, cfg.slope);
    y = upsample1d(y, cfg.audio_pool1);
    y = deconv1d(y, p.dec1d_deconv2, Act::None);
    return y;
}

Tensor fuse(const Tensor& latent2d, const Tensor& latent1d) {
    return ops::concat_cols(latent2d, latent1d);
}

Forward forward_batch(const Batch& batch, const ModelParams& p) {
    const ModelConfig& cfg = p.config;
    const long B = batch.batch, S = batch.steps;
    Forward f;
    if (cfg.use_visual) {
        Enc2dOut e = encode2d(batch.images, p);
        f.latent2d = e.latent;
        if (cfg.use_decoders) f.recon2d = decode2d(e.latent, p);
    }
    if (cfg.use_audio) {
        Enc1dOut e = encode1d(batch.audio, p);
        f.latent1d = e.features;
        if (cfg.use_decoders) f.recon1d = decode1d(e.bottleneck, p);
    }
    f.fused = fuse(f.latent2d, f.latent1d);

    LstmState s1{Tensor::zeros({B, cfg.lstm_hidden}), Tensor::zeros({B, cfg.lstm_hidden})};
    LstmState s2{Tensor::zeros({B, cfg.lstm_hidden}), Tensor::zeros({B, cfg.lstm_hidden})};
    Tensor prev_pred;
    for (long s = 0; s < S; ++s) {
        std::vector<long> rows(static_cast<size_t>(B));
        for (long i = 0; i < B; ++i) rows[static_cast<size_t>(i)] = i * S + s;
        Tensor xs = ops::select_rows(f.fused, std::move(rows));
        if (cfg.feedback_predictions) {
            Tensor fb = prev_pred.defined() ? prev_pred : Tensor::zeros({B, 2});
            xs = ops::concat_cols(xs, fb);
        }
        s1 = lstm_cell(xs, s1, p.lstm1);
        s2 = lstm_cell(s1.h, s2, p.lstm2);
        if (cfg.feedback_predictions) prev_pred = linear(s2.h, p.head_w, p.head_b);
    }
    f.pred = cfg.feedback_predictions ? prev_pred : linear(s2.h, p.head_w, p.head_b);
    return f;
}

std::pair<double, double> predict_window(const Window& w, const ModelParams& p) {
    Batch b = assemble_batch({w});
    Forward f = forward_batch(b, p);
    return {f.pred.values()[0], f.pred.values()[1]};
}

namespace {
std::atomic<long> g_ccc_degenerate{0};

// Population variance/covariance on raw values, for the degeneracy peek.
void series_stats(const std::vector<double>& v, double& mean, double& var) {
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    mean = m;
    var = s / static_cast<double>(v.size());
}
} // namespace

long ccc_degenerate_count() { return g_ccc_degenerate.load(); }
void reset_ccc_degenerate_count() { g_ccc_degenerate.store(0); }

Tensor ccc(const Tensor& x, const Tensor& y) {
    if (!x.defined() || !y.defined() || x.rank() != 1 || y.rank() != 1)
        throw ShapeError("ccc: expects two rank-1 series");
    if (x.size() != y.size())
        throw ShapeError("ccc: series lengths differ (" + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()) + ")");
    if (x.size() < 2) throw ShapeError("ccc: series must hold at least 2 values");

    double mx, vx, my, vy;
    series_stats(x.values(), mx, vx);
    series_stats(y.values(), my, vy);
    if (vx + vy + (mx - my) * (mx - my) == 0.0) {
        ++g_ccc_degenerate;
        return Tensor::scalar(0.0);
    }
    Tensor cov = ops::covariance(x, y);
    Tensor dmu = ops::sub(ops::reduce_mean(x), ops::reduce_mean(y));
    Tensor denom =
        ops::add(ops::add(ops::variance(x), ops::variance(y)), ops::mul(dmu, dmu));
    return ops::div(ops::scale(cov, 2.0), denom);
}

namespace {
// Compensated sum, so pooled evaluation is invariant to recording order.
double kahan_sum(const std::vector<double>& v,
                 const std::function<double(double)>& f) {
    double s = 0, c = 0;
    for (double x : v) {
        const double term = f(x) - c;
        const double t = s + term;
        c = (t - s) - term;
        s = t;
    }
    return s;
}
} // namespace

double ccc_value(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size())
        throw ShapeError("ccc: series lengths differ (" + std::to_string(x.size()) +
                         " vs " + std::to_string(y.size()) + ")");
    if (x.size() < 2) throw ShapeError("ccc: series must hold at least 2 values");
    const double n = static_cast<double>(x.size());
    const double mx = kahan_sum(x, [](double v) { return v; }) / n;
    const double my = kahan_sum(y, [](double v) { return v; }) / n;
    const double vx = kahan_sum(x, [mx](double v) { return (v - mx) * (v - mx); }) / n;
    const double vy = kahan_sum(y, [my](double v) { return (v - my) * (v - my); }) / n;
    double cov = 0, comp = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double term = (x[i] - mx) * (y[i] - my) - comp;
        const double t = cov + term;
        comp = (t - cov) - term;
        cov = t;
    }
    cov /= n;
    const double denom = vx + vy + (mx - my) * (mx - my);
    if (denom == 0.0) {
        ++g_ccc_degenerate;
        return 0.0;
    }
    return 2.0 * cov / denom;
}

Tensor loss_rec(const Tensor& pred, const Tensor& labels) {
    if (pred.rank() != 2 || labels.rank() != 2 || pred.dim(1) != 2 || labels.dim(1) != 2 ||
        pred.dim(0) != labels.dim(0))
        throw ShapeError("loss_rec: predictions and labels must both be {B,2}");
    Tensor ra = ccc(ops::select_col(pred, 0), ops::select_col(labels, 0));
    Tensor rv = ccc(ops::select_col(pred, 1), ops::select_col(labels, 1));
    return ops::add_scalar(ops::scale(ops::add(ra, rv), -0.5), 1.0);
}

Tensor loss_recon(const Tensor& recon, const Tensor& target) {
    if (!recon.defined() || recon.size() == 0)
        throw ShapeError("loss_recon: empty reconstruction batch");
    return ops::sum_squared_diff(recon, target);
}

Tensor combine_loss(const Tensor& l2d, const Tensor& l1d, const Tensor& lrec,
                    const LossWeights& w) {
    return ops::add(ops::add(ops::scale(l2d, w.alpha), ops::scale(l1d, w.beta)),
                    ops::scale(lrec, w.gamma));
}

LossBreakdown total_loss(const Forward& f, const Batch& batch, const LossWeights& w) {
    LossBreakdown out;
    out.l2d = f.recon2d.defined() ? loss_recon(f.recon2d, batch.images) : Tensor::scalar(0.0);
    out.l1d = f.recon1d.defined() ? loss_recon(f.recon1d, batch.audio) : Tensor::scalar(0.0);
    out.lrec = loss_rec(f.pred, batch.labels);
    out.total = combine_loss(out.l2d, out.l1d, out.lrec, w);
    return out;
}

} // namespace affect
