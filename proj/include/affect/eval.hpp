#ifndef AFFECT_EVAL_HPP
#define AFFECT_EVAL_HPP

#include <string>
#include <vector>

#include "affect/model.hpp"

namespace affect {

struct TrainConfig;

// Root-mean-square error over one dimension.
double rmse(const std::vector<double>& pred, const std::vector<double>& truth);
// Both dimensions under one 1/N: sqrt(1/N * sum((a_hat-a)^2 + (v_hat-v)^2)).
double rmse_joint(const std::vector<double>& a_hat, const std::vector<double>& a,
                  const std::vector<double>& v_hat, const std::vector<double>& v);

struct EvalReport {
    double Ea = 0, Ev = 0, Eav = 0;
    double ccc_a = 0, ccc_v = 0;
    long frames = 0;
    std::string fingerprint; // architecture line of the evaluated model
};

struct PredRow {
    std::string recording_id;
    long t = 0;
    double a_hat = 0, v_hat = 0, a = 0, v = 0;
};

// Predictions for every window (t >= k) of every recording, pooled globally
// in dataset order with compensated summation; dump receives one row per
// prediction when non-null.
EvalReport evaluate_model(const ModelParams& p, const std::vector<RecordingView>& recs,
                          std::vector<PredRow>* dump = nullptr);

void write_predictions_csv(const std::string& path, const std::vector<PredRow>& rows);
void write_report_csv(const std::string& path, const EvalReport& r);
void write_report_text(const std::string& path, const EvalReport& r);

// Trains and evaluates one variant of the fixed synthetic benchmark.
// Names: full, visual-only, audio-only, no-autoencoder, hidden-<n>.
EvalReport run_ablation(const std::string& name, const TrainConfig& base);

} // namespace affect

#endif
