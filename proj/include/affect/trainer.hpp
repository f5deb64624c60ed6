#ifndef AFFECT_TRAINER_HPP
#define AFFECT_TRAINER_HPP

#include <string>
#include <vector>

#include "affect/model.hpp"

namespace affect {

// Everything a run needs; the config file is these fields as key=value lines.
struct TrainConfig {
    double alpha = 1.0;
    double beta = 1.0;
    double gamma = 0.01;
    double lr = 1e-4;
    long batch_size = 32;
    long max_steps = 5000;
    uint64_t seed = 1;
    long k = kWindowK;              // window length is fixed by the data layout
    long lstm_hidden = 0;           // 0 = the preset's width (512 full-size)
    long eval_interval = 100;
    std::string checkpoint_dir = "out";
    std::string preset = "paper";   // paper | slim
    std::string ablation = "full";  // full | visual-only | audio-only | no-autoencoder
    bool feedback_predictions = false;
    double clip_norm = 0.0;         // 0 disables gradient clipping
    long overfit_windows = 0;       // >0: repeat the first windows every step
    double stop_ccc_a = 0.0;        // early stop once both validation CCCs
    double stop_ccc_v = 0.0;        //   strictly exceed these (0 = never)
    std::string resume_from;        // checkpoint to continue from
};

TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);
std::string serialize_config(const TrainConfig& c);

// Preset + ablation + overrides resolved into architecture widths.
ModelConfig model_config(const TrainConfig& c);

std::string serialize_model_config(const ModelConfig& c);
ModelConfig parse_model_config(const std::string& text);

struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;
    std::vector<std::vector<double>> m, v;  // parallel to the parameter list
};

AdamState make_adam(const std::vector<Tensor>& params);

// Standard bias-corrected update; missing gradients count as zero.
void adam_step(std::vector<Tensor>& params, AdamState& st, double lr);

// Scales all gradients so the global norm is at most max_norm.
void clip_gradients(const std::vector<Tensor>& params, double max_norm);

// Versioned container ("AFCK"): architecture line, Adam state, then every
// named parameter with shape, values, and both moment buffers. Bitwise
// round-trip; shape or name drift against the live model is refused.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const AdamState& st);
void load_checkpoint(const std::string& path, ModelParams& params, AdamState& st);
ModelConfig peek_checkpoint_config(const std::string& path);

struct TrainResult {
    std::string curve_path;
    std::string final_checkpoint;
    std::string best_checkpoint;    // best mean validation CCC (when validated)
    long steps_run = 0;
    double final_loss = 0;
    double best_val_ccc_a = 0, best_val_ccc_v = 0;
};

// Deterministic end-to-end optimization; writes the per-step learning curve
// (CSV: step,total_loss,l2d,l1d,lrec,val_ccc_arousal,val_ccc_valence,
// val_Ea,val_Ev,val_Eav) into checkpoint_dir. NaN loss aborts with the step
// number and the last finite losses.
TrainResult train(const TrainConfig& cfg, const std::vector<RecordingView>& train_set,
                  const std::vector<RecordingView>& val_set);

} // namespace affect

#endif
