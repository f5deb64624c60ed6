#include "affect/trainer.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>

#include "affect/eval.hpp"

namespace affect {

namespace {

namespace fs = std::filesystem;

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("bad number for " + key + ": '" + v + "'");
    }
}

long to_long(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        long l = std::stol(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return l;
    } catch (const std::exception&) {
        throw ConfigError("bad integer for " + key + ": '" + v + "'");
    }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        unsigned long long l = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return l;
    } catch (const std::exception&) {
        throw ConfigError("bad integer for " + key + ": '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

std::string fmt_double(double d) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", d);
    return buf;
}

void validate(const TrainConfig& c) {
    if (c.lr <= 0) throw ConfigError("lr must be positive");
    if (c.batch_size < 1) throw ConfigError("batch_size must be positive");
    if (c.max_steps < 0) throw ConfigError("max_steps must be nonnegative");
    if (c.gamma < 0) throw ConfigError("gamma must be nonnegative");
    if (c.k != kWindowK)
        throw ConfigError("k is fixed at " + std::to_string(kWindowK) +
                          " by the frame layout");
    if (c.lstm_hidden < 0) throw ConfigError("lstm_hidden must be nonnegative");
    if (c.eval_interval < 1) throw ConfigError("eval_interval must be positive");
    if (c.clip_norm < 0) throw ConfigError("clip_norm must be nonnegative");
    if (c.overfit_windows < 0) throw ConfigError("overfit_windows must be nonnegative");
    if (c.preset != "paper" && c.preset != "slim")
        throw ConfigError("unknown preset '" + c.preset +
                          "' (recordings need the full input geometry: paper | slim)");
    if (c.ablation != "full" && c.ablation != "visual-only" && c.ablation != "audio-only" &&
        c.ablation != "no-autoencoder")
        throw ConfigError("unknown ablation '" + c.ablation + "'");
}

} // namespace

TrainConfig parse_config(const std::string& text) {
    TrainConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back())))
            line.pop_back();
        size_t start = 0;
        while (start < line.size() && std::isspace(static_cast<unsigned char>(line[start])))
            ++start;
        if (start == line.size()) continue;
        const auto eq = line.find('=', start);
        if (eq == std::string::npos)
            throw ConfigError("expected key=value, got '" + line.substr(start) + "'");
        const std::string key = line.substr(start, eq - start);
        const std::string val = line.substr(eq + 1);
        if (key == "alpha") c.alpha = to_double(key, val);
        else if (key == "beta") c.beta = to_double(key, val);
        else if (key == "gamma") c.gamma = to_double(key, val);
        else if (key == "lr") c.lr = to_double(key, val);
        else if (key == "batch_size") c.batch_size = to_long(key, val);
        else if (key == "max_steps") c.max_steps = to_long(key, val);
        else if (key == "seed") c.seed = to_u64(key, val);
        else if (key == "k") c.k = to_long(key, val);
        else if (key == "lstm_hidden") c.lstm_hidden = to_long(key, val);
        else if (key == "eval_interval") c.eval_interval = to_long(key, val);
        else if (key == "checkpoint_dir") c.checkpoint_dir = val;
        else if (key == "preset") c.preset = val;
        else if (key == "ablation") c.ablation = val;
        else if (key == "feedback_predictions") c.feedback_predictions = to_bool(key, val);
        else if (key == "clip_norm") c.clip_norm = to_double(key, val);
        else if (key == "overfit_windows") c.overfit_windows = to_long(key, val);
        else if (key == "stop_ccc_a") c.stop_ccc_a = to_double(key, val);
        else if (key == "stop_ccc_v") c.stop_ccc_v = to_double(key, val);
        else if (key == "resume_from") c.resume_from = val;
        else throw ConfigError("unknown config key '" + key + "'");
    }
    validate(c);
    return c;
}

TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string serialize_config(const TrainConfig& c) {
    std::ostringstream out;
    out << "alpha=" << fmt_double(c.alpha) << "\n";
    out << "beta=" << fmt_double(c.beta) << "\n";
    out << "gamma=" << fmt_double(c.gamma) << "\n";
    out << "lr=" << fmt_double(c.lr) << "\n";
    out << "batch_size=" << c.batch_size << "\n";
    out << "max_steps=" << c.max_steps << "\n";
    out << "seed=" << c.seed << "\n";
    out << "k=" << c.k << "\n";
    out << "lstm_hidden=" << c.lstm_hidden << "\n";
    out << "eval_interval=" << c.eval_interval << "\n";
    out << "checkpoint_dir=" << c.checkpoint_dir << "\n";
    out << "preset=" << c.preset << "\n";
    out << "ablation=" << c.ablation << "\n";
    out << "feedback_predictions=" << (c.feedback_predictions ? "true" : "false") << "\n";
    out << "clip_norm=" << fmt_double(c.clip_norm) << "\n";
    out << "overfit_windows=" << c.overfit_windows << "\n";
    out << "stop_ccc_a=" << fmt_double(c.stop_ccc_a) << "\n";
    out << "stop_ccc_v=" << fmt_double(c.stop_ccc_v) << "\n";
    out << "resume_from=" << c.resume_from << "\n";
    return out.str();
}

ModelConfig model_config(const TrainConfig& c) {
    validate(c);
    ModelConfig m;
    if (c.preset == "paper") m = ModelConfig::paper();
    else m = ModelConfig::slim();
    if (c.lstm_hidden > 0) m.lstm_hidden = c.lstm_hidden;
    if (c.ablation == "visual-only") m.use_audio = false;
    else if (c.ablation == "audio-only") m.use_visual = false;
    else if (c.ablation == "no-autoencoder") m.use_decoders = false;
    m.feedback_predictions = c.feedback_predictions;
    return m;
}

std::string serialize_model_config(const ModelConfig& c) {
    std::ostringstream out;
    out << "block1_mid=" << c.block1_mid << ";block1_out=" << c.block1_out
        << ";block2_mid=" << c.block2_mid << ";block2_out=" << c.block2_out
        << ";latent2d=" << c.latent2d << ";audio_channels=" << c.audio_channels
        << ";bottleneck1d=" << c.bottleneck1d
        << ";decoder1d_channels=" << c.decoder1d_channels
        << ";lstm_hidden=" << c.lstm_hidden << ";slope=" << fmt_double(c.slope)
        << ";image_size=" << c.image_size << ";audio_len=" << c.audio_len
        << ";audio_kernel1=" << c.audio_kernel1 << ";audio_kernel2=" << c.audio_kernel2
        << ";audio_pool1=" << c.audio_pool1 << ";audio_pool2=" << c.audio_pool2
        << ";use_visual=" << c.use_visual << ";use_audio=" << c.use_audio
        << ";use_decoders=" << c.use_decoders
        << ";feedback_predictions=" << c.feedback_predictions;
    return out.str();
}

ModelConfig parse_model_config(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ';')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos)
            throw ConfigError("bad architecture entry '" + item + "'");
        const std::string key = item.substr(0, eq);
        const std::string val = item.substr(eq + 1);
        if (key == "block1_mid") c.block1_mid = to_long(key, val);
        else if (key == "block1_out") c.block1_out = to_long(key, val);
        else if (key == "block2_mid") c.block2_mid = to_long(key, val);
        else if (key == "block2_out") c.block2_out = to_long(key, val);
        else if (key == "latent2d") c.latent2d = to_long(key, val);
        else if (key == "audio_channels") c.audio_channels = to_long(key, val);
        else if (key == "bottleneck1d") c.bottleneck1d = to_long(key, val);
        else if (key == "decoder1d_channels") c.decoder1d_channels = to_long(key, val);
        else if (key == "lstm_hidden") c.lstm_hidden = to_long(key, val);
        else if (key == "slope") c.slope = to_double(key, val);
        else if (key == "image_size") c.image_size = to_long(key, val);
        else if (key == "audio_len") c.audio_len = to_long(key, val);
        else if (key == "audio_kernel1") c.audio_kernel1 = to_long(key, val);
        else if (key == "audio_kernel2") c.audio_kernel2 = to_long(key, val);
        else if (key == "audio_pool1") c.audio_pool1 = to_long(key, val);
        else if (key == "audio_pool2") c.audio_pool2 = to_long(key, val);
        else if (key == "use_visual") c.use_visual = to_bool(key, val);
        else if (key == "use_audio") c.use_audio = to_bool(key, val);
        else if (key == "use_decoders") c.use_decoders = to_bool(key, val);
        else if (key == "feedback_predictions") c.feedback_predictions = to_bool(key, val);
        else throw ConfigError("unknown architecture key '" + key + "'");
    }
    return c;
}

AdamState make_adam(const std::vector<Tensor>& params) {
    AdamState st;
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        st.m[i].assign(static_cast<size_t>(params[i].size()), 0.0);
        st.v[i].assign(static_cast<size_t>(params[i].size()), 0.0);
    }
    return st;
}

void adam_step(std::vector<Tensor>& params, AdamState& st, double lr) {
    if (st.m.size() != params.size() || st.v.size() != params.size())
        throw ShapeError("adam_step: state tracks " + std::to_string(st.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
    ++st.step;
    const double corr1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double corr2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& t = params[i];
        const size_t n = static_cast<size_t>(t.size());
        if (st.m[i].size() != n)
            throw ShapeError("adam_step: moment buffer " + std::to_string(i) +
                             " holds " + std::to_string(st.m[i].size()) +
                             " values, parameter holds " + std::to_string(n));
        double* theta = t.data();
        double* m = st.m[i].data();
        double* v = st.v[i].data();
        const double* g = t.has_grad() ? t.grad().data() : nullptr;
        for (size_t j = 0; j < n; ++j) {
            const double gj = g ? g[j] : 0.0;
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
            theta[j] -= lr * (m[j] / corr1) / (std::sqrt(v[j] / corr2) + st.eps);
        }
    }
}

void clip_gradients(const std::vector<Tensor>& params, double max_norm) {
    double sq = 0;
    for (const Tensor& t : params) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0) return;
    const double s = max_norm / norm;
    for (const Tensor& t : params) {
        if (!t.has_grad()) continue;
        Tensor handle = t;   // tensors share storage; copying drops const
        for (double& g : handle.grad()) g *= s;
    }
}

// ------------------------------------------------------------- checkpoints

namespace {

constexpr char kCkptMagic[4] = {'A', 'F', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::ostream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
}
void put_f64(std::ostream& out, double v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
}

struct CkptReader {
    std::ifstream in;
    std::string path;
    CkptReader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw DataError("cannot open checkpoint " + p);
    }
    void raw(void* dst, size_t n, const char* what) {
        in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n))
            throw DataError(path + ": truncated checkpoint while reading " + what);
    }
    uint32_t u32(const char* what) {
        uint32_t v;
        raw(&v, 4, what);
        return v;
    }
    uint64_t u64(const char* what) {
        uint64_t v;
        raw(&v, 8, what);
        return v;
    }
    double f64(const char* what) {
        double v;
        raw(&v, 8, what);
        return v;
    }
    std::string str(const char* what) {
        uint32_t n = u32(what);
        std::string s(n, '\0');
        raw(s.data(), n, what);
        return s;
    }
};

// Header through the architecture line; leaves the reader positioned at the
// Adam block.
ModelConfig read_ckpt_header(CkptReader& r) {
    char magic[4];
    r.raw(magic, 4, "magic");
    if (std::memcmp(magic, kCkptMagic, 4) != 0)
        throw DataError(r.path + ": bad magic, not an AFCK checkpoint");
    const uint32_t version = r.u32("version");
    if (version != kCkptVersion)
        throw ConfigError(r.path + ": unsupported checkpoint version " +
                          std::to_string(version));
    return parse_model_config(r.str("architecture"));
}

} // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const AdamState& st) {
    auto named = named_parameters(params);
    if (named.size() != st.m.size())
        throw ShapeError("save_checkpoint: optimizer tracks " + std::to_string(st.m.size()) +
                         " parameters, model has " + std::to_string(named.size()));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out.write(kCkptMagic, 4);
    put_u32(out, kCkptVersion);
    const std::string arch = serialize_model_config(params.config);
    put_u32(out, static_cast<uint32_t>(arch.size()));
    out.write(arch.data(), static_cast<std::streamsize>(arch.size()));
    put_u64(out, static_cast<uint64_t>(st.step));
    put_f64(out, st.beta1);
    put_f64(out, st.beta2);
    put_f64(out, st.eps);
    put_u32(out, static_cast<uint32_t>(named.size()));
    for (size_t i = 0; i < named.size(); ++i) {
        const Tensor& t = named[i].tensor;
        put_u32(out, static_cast<uint32_t>(named[i].name.size()));
        out.write(named[i].name.data(),
                  static_cast<std::streamsize>(named[i].name.size()));
        put_u32(out, static_cast<uint32_t>(t.rank()));
        for (long d : t.shape()) put_u64(out, static_cast<uint64_t>(d));
        const size_t n = static_cast<size_t>(t.size());
        out.write(reinterpret_cast<const char*>(t.values().data()),
                  static_cast<std::streamsize>(n * 8));
        out.write(reinterpret_cast<const char*>(st.m[i].data()),
                  static_cast<std::streamsize>(n * 8));
        out.write(reinterpret_cast<const char*>(st.v[i].data()),
                  static_cast<std::streamsize>(n * 8));
    }
    if (!out) throw DataError("short write to " + path);
}

void load_checkpoint(const std::string& path, ModelParams& params, AdamState& st) {
    CkptReader r(path);
    const ModelConfig stored = read_ckpt_header(r);
    const std::string stored_line = serialize_model_config(stored);
    const std::string live_line = serialize_model_config(params.config);
    if (stored_line != live_line)
        throw ConfigError(path + ": checkpoint architecture (" + stored_line +
                          ") does not match the configured model (" + live_line + ")");
    st.step = static_cast<long>(r.u64("step"));
    st.beta1 = r.f64("beta1");
    st.beta2 = r.f64("beta2");
    st.eps = r.f64("eps");
    auto named = named_parameters(params);
    const uint32_t count = r.u32("parameter count");
    if (count != named.size())
        throw ConfigError(path + ": checkpoint holds " + std::to_string(count) +
                          " parameters, model has " + std::to_string(named.size()));
    st.m.assign(named.size(), {});
    st.v.assign(named.size(), {});
    for (size_t i = 0; i < named.size(); ++i) {
        const std::string name = r.str("parameter name");
        if (name != named[i].name)
            throw ConfigError(path + ": parameter '" + name + "' where '" +
                              named[i].name + "' was expected");
        const uint32_t rank = r.u32("rank");
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<long>(r.u64("dimension"));
        if (shape != named[i].tensor.shape())
            throw ConfigError(path + ": shape mismatch for " + name);
        const size_t n = static_cast<size_t>(named[i].tensor.size());
        r.raw(named[i].tensor.data(), n * 8, "parameter values");
        st.m[i].resize(n);
        r.raw(st.m[i].data(), n * 8, "first moments");
        st.v[i].resize(n);
        r.raw(st.v[i].data(), n * 8, "second moments");
    }
}

ModelConfig peek_checkpoint_config(const std::string& path) {
    CkptReader r(path);
    return read_ckpt_header(r);
}

// ------------------------------------------------------------------ train

namespace {

// Pure function of (seed, epoch): the order windows are visited in.
std::vector<long> epoch_order(uint64_t seed, long epoch, long n) {
    std::vector<long> idx(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(epoch) + 1);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

std::string csv_num(double d) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", d);
    return buf;
}

} // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<RecordingView>& train_set,
                  const std::vector<RecordingView>& val_set) {
    validate(cfg);
    const ModelConfig mc = model_config(cfg);
    ModelParams params = make_model(mc, cfg.seed);
    std::vector<Tensor> tensors = parameters(params);
    AdamState adam = make_adam(tensors);

    long start_step = 0;
    if (!cfg.resume_from.empty()) {
        load_checkpoint(cfg.resume_from, params, adam);
        start_step = adam.step;
    }

    std::vector<Window> all;
    for (const auto& rec : train_set)
        for (const Window& w : window_stream(rec)) all.push_back(w);
    if (all.empty()) throw DataError("no training windows");

    const bool overfit = cfg.overfit_windows > 0;
    if (overfit && static_cast<long>(all.size()) > cfg.overfit_windows)
        all.resize(static_cast<size_t>(cfg.overfit_windows));
    const long n_windows = static_cast<long>(all.size());
    const long bs = std::min(cfg.batch_size, n_windows);
    if (cfg.gamma > 0 && bs < 2)
        throw ConfigError("the concordance term needs batches of at least 2 windows; "
                          "got " + std::to_string(bs) + " (set gamma=0 to train without it)");
    const long steps_per_epoch = std::max(1L, n_windows / bs);

    fs::create_directories(cfg.checkpoint_dir);
    TrainResult res;
    res.curve_path = (fs::path(cfg.checkpoint_dir) / "curve.csv").string();
    res.final_checkpoint = (fs::path(cfg.checkpoint_dir) / "final.afck").string();
    const std::string best_path = (fs::path(cfg.checkpoint_dir) / "best.afck").string();

    std::ofstream curve(res.curve_path,
                        start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!curve) throw DataError("cannot open " + res.curve_path + " for writing");
    if (start_step == 0)
        curve << "step,total_loss,l2d,l1d,lrec,val_ccc_arousal,val_ccc_valence,"
                 "val_Ea,val_Ev,val_Eav\n";

    const LossWeights weights{cfg.alpha, cfg.beta, cfg.gamma};
    double last_total = 0, last_l2d = 0, last_l1d = 0, last_lrec = 0;
    bool have_finite = false;
    double best_mean_ccc = -2.0;
    bool stop_early = false;

    for (long step = start_step + 1; step <= cfg.max_steps && !stop_early; ++step) {
        std::vector<Window> batch_windows;
        if (overfit) {
            batch_windows.assign(all.begin(), all.begin() + bs);
        } else {
            const long epoch = (step - 1) / steps_per_epoch;
            const long slot = (step - 1) % steps_per_epoch;
            const std::vector<long> order = epoch_order(cfg.seed, epoch, n_windows);
            for (long j = slot * bs; j < slot * bs + bs; ++j)
                batch_windows.push_back(all[static_cast<size_t>(order[static_cast<size_t>(j)])]);
        }
        Batch batch = assemble_batch(batch_windows);

        double total, l2d, l1d, lrec;
        {
            Tape tape;
            tape.set_release_memory(true);
            Forward f = forward_batch(batch, params);
            LossBreakdown loss = total_loss(f, batch, weights);
            total = loss.total.item();
            l2d = loss.l2d.item();
            l1d = loss.l1d.item();
            lrec = loss.lrec.item();
            if (!std::isfinite(total)) {
                std::string last = have_finite
                                       ? "last finite losses: total=" + csv_num(last_total) +
                                             " l2d=" + csv_num(last_l2d) + " l1d=" +
                                             csv_num(last_l1d) + " lrec=" + csv_num(last_lrec)
                                       : "no finite step completed";
                throw NumericError("loss became non-finite at step " + std::to_string(step) +
                                   "; " + last);
            }
            tape.backward(loss.total);
        }
        last_total = total;
        last_l2d = l2d;
        last_l1d = l1d;
        last_lrec = lrec;
        have_finite = true;

        if (cfg.clip_norm > 0) clip_gradients(tensors, cfg.clip_norm);
        adam_step(tensors, adam, cfg.lr);
        for (Tensor& t : tensors) t.free_grad();

        std::string val_cols = ",,,,";
        const bool do_eval =
            !val_set.empty() && (step % cfg.eval_interval == 0 || step == cfg.max_steps);
        if (do_eval) {
            EvalReport er = evaluate_model(params, val_set);
            val_cols = csv_num(er.ccc_a) + "," + csv_num(er.ccc_v) + "," + csv_num(er.Ea) +
                       "," + csv_num(er.Ev) + "," + csv_num(er.Eav);
            const double mean_ccc = 0.5 * (er.ccc_a + er.ccc_v);
            if (mean_ccc > best_mean_ccc) {
                best_mean_ccc = mean_ccc;
                res.best_val_ccc_a = er.ccc_a;
                res.best_val_ccc_v = er.ccc_v;
                save_checkpoint(best_path, params, adam);
                res.best_checkpoint = best_path;
            }
            if (cfg.stop_ccc_a > 0 && cfg.stop_ccc_v > 0 && er.ccc_a > cfg.stop_ccc_a &&
                er.ccc_v > cfg.stop_ccc_v)
                stop_early = true;
        }
        curve << step << "," << csv_num(total) << "," << csv_num(l2d) << ","
              << csv_num(l1d) << "," << csv_num(lrec) << "," << val_cols << "\n";
        res.steps_run = step - start_step;
        res.final_loss = total;
    }
    curve.flush();
    save_checkpoint(res.final_checkpoint, params, adam);
    return res;
}

} // namespace affect
