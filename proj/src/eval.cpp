#include "affect/eval.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "affect/trainer.hpp"

namespace affect {

namespace {

double kahan(const std::vector<double>& v) {
    double s = 0, c = 0;
    for (double x : v) {
        const double term = x - c;
        const double t = s + term;
        c = (t - s) - term;
        s = t;
    }
    return s;
}

std::vector<double> squared_diffs(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = (a[i] - b[i]) * (a[i] - b[i]);
    return out;
}

std::string num(double d) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", d);
    return buf;
}

} // namespace

double rmse(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (pred.empty()) throw ShapeError("rmse: empty series");
    if (pred.size() != truth.size())
        throw ShapeError("rmse: series lengths differ (" + std::to_string(pred.size()) +
                         " vs " + std::to_string(truth.size()) + ")");
    return std::sqrt(kahan(squared_diffs(pred, truth)) / static_cast<double>(pred.size()));
}

double rmse_joint(const std::vector<double>& a_hat, const std::vector<double>& a,
                  const std::vector<double>& v_hat, const std::vector<double>& v) {
    if (a_hat.empty()) throw ShapeError("rmse_joint: empty series");
    if (a_hat.size() != a.size() || v_hat.size() != v.size() || a_hat.size() != v_hat.size())
        throw ShapeError("rmse_joint: series lengths differ");
    const double sa = kahan(squared_diffs(a_hat, a));
    const double sv = kahan(squared_diffs(v_hat, v));
    return std::sqrt((sa + sv) / static_cast<double>(a_hat.size()));
}

EvalReport evaluate_model(const ModelParams& p, const std::vector<RecordingView>& recs,
                          std::vector<PredRow>* dump) {
    constexpr long kChunk = 32;
    std::vector<double> ah, vh, at, vt;
    for (const RecordingView& rec : recs) {
        const std::vector<Window> ws = window_stream(rec);
        for (size_t base = 0; base < ws.size(); base += kChunk) {
            const size_t end = std::min(ws.size(), base + kChunk);
            std::vector<Window> chunk(ws.begin() + static_cast<long>(base),
                                      ws.begin() + static_cast<long>(end));
            Batch b = assemble_batch(chunk);
            Forward f = forward_batch(b, p);
            const std::vector<double>& pred = f.pred.values();
            for (size_t i = 0; i < chunk.size(); ++i) {
                const long t = chunk[i].t;
                ah.push_back(pred[i * 2]);
                vh.push_back(pred[i * 2 + 1]);
                at.push_back(rec.arousal(t));
                vt.push_back(rec.valence(t));
                if (dump)
                    dump->push_back(
                        {rec.id(), t, pred[i * 2], pred[i * 2 + 1], at.back(), vt.back()});
            }
        }
    }
    if (ah.empty()) throw DataError("no windows to evaluate");
    EvalReport r;
    r.frames = static_cast<long>(ah.size());
    r.Ea = rmse(ah, at);
    r.Ev = rmse(vh, vt);
    r.Eav = rmse_joint(ah, at, vh, vt);
    r.ccc_a = ccc_value(ah, at);
    r.ccc_v = ccc_value(vh, vt);
    r.fingerprint = serialize_model_config(p.config);
    return r;
}

void write_predictions_csv(const std::string& path, const std::vector<PredRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "recording_id,t,a_hat,v_hat,a,v\n";
    for (const PredRow& r : rows)
        out << r.recording_id << "," << r.t << "," << num(r.a_hat) << "," << num(r.v_hat)
            << "," << num(r.a) << "," << num(r.v) << "\n";
    if (!out) throw DataError("short write to " + path);
}

void write_report_csv(const std::string& path, const EvalReport& r) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "Ea,Ev,Eav,ccc_arousal,ccc_valence,frames,fingerprint\n";
    out << num(r.Ea) << "," << num(r.Ev) << "," << num(r.Eav) << "," << num(r.ccc_a) << ","
        << num(r.ccc_v) << "," << r.frames << ",\"" << r.fingerprint << "\"\n";
    if (!out) throw DataError("short write to " + path);
}

void write_report_text(const std::string& path, const EvalReport& r) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "frames evaluated: " << r.frames << "\n";
    out << "RMSE arousal (E_a): " << num(r.Ea) << "\n";
    out << "RMSE valence (E_v): " << num(r.Ev) << "\n";
    out << "RMSE joint  (E_av): " << num(r.Eav) << "\n";
    out << "CCC arousal: " << num(r.ccc_a) << "\n";
    out << "CCC valence: " << num(r.ccc_v) << "\n";
    out << "model: " << r.fingerprint << "\n";
    if (!out) throw DataError("short write to " + path);
}

// Fixed benchmark for variant comparisons: a small deterministic dataset
// derived from the base seed, identical across variants.
EvalReport run_ablation(const std::string& name, const TrainConfig& base) {
    TrainConfig cfg = base;
    if (name == "full") {
        cfg.ablation = "full";
    } else if (name == "visual-only" || name == "audio-only") {
        cfg.ablation = name;
    } else if (name == "no-autoencoder") {
        cfg.ablation = name;
        cfg.alpha = 0;
        cfg.beta = 0;
    } else if (name.rfind("hidden-", 0) == 0) {
        const std::string tail = name.substr(7);
        long hidden = 0;
        try {
            size_t used = 0;
            hidden = std::stol(tail, &used);
            if (used != tail.size() || hidden < 1) throw std::invalid_argument(tail);
        } catch (const std::exception&) {
            throw ConfigError("bad hidden size in ablation '" + name + "'");
        }
        cfg.lstm_hidden = hidden;
    } else {
        throw ConfigError("unknown ablation '" + name + "'");
    }

    constexpr long kTrainRecs = 6, kValRecs = 2, kFrames = 200;
    const SnrConfig snr{0.05, 0.2};
    std::vector<RecordingView> train_set, val_set;
    for (long i = 0; i < kTrainRecs; ++i)
        train_set.push_back(RecordingView::from_memory(
            generate_recording(base.seed * 1000 + static_cast<uint64_t>(i), kFrames, snr)));
    for (long i = 0; i < kValRecs; ++i)
        val_set.push_back(RecordingView::from_memory(generate_recording(
            base.seed * 1000 + 500 + static_cast<uint64_t>(i), kFrames, snr)));

    cfg.checkpoint_dir =
        (std::filesystem::path(base.checkpoint_dir) / ("ablate-" + name)).string();
    TrainResult tr = train(cfg, train_set, val_set);

    const std::string ckpt =
        tr.best_checkpoint.empty() ? tr.final_checkpoint : tr.best_checkpoint;
    ModelParams params = make_model(peek_checkpoint_config(ckpt), 0);
    AdamState st = make_adam(parameters(params));
    load_checkpoint(ckpt, params, st);
    return evaluate_model(params, val_set);
}

} // namespace affect
