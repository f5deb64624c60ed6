// Command-line front end: synthetic data generation, training, evaluation,
// ablations, and the numeric gradient verification suite.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "affect/data.hpp"
#include "affect/errors.hpp"
#include "affect/eval.hpp"
#include "affect/model.hpp"
#include "affect/trainer.hpp"
#include "affect/verify.hpp"

namespace fs = std::filesystem;
using namespace affect;

namespace {

std::vector<RecordingView> load_set(const std::string& manifest) {
    std::vector<RecordingView> recs;
    for (const auto& path : read_manifest(manifest))
        recs.push_back(RecordingView::map_file(path));
    return recs;
}

int cmd_generate(uint64_t seed, long n, long frames, const std::string& out,
                 double pixel_noise, double audio_noise) {
    if (n < 1 || frames < kWindowK + 1)
        throw ConfigError("need at least 1 recording of at least " +
                          std::to_string(kWindowK + 1) + " frames");
    fs::create_directories(out);
    const SnrConfig snr{pixel_noise, audio_noise};
    std::vector<std::string> names;
    for (long i = 0; i < n; ++i) {
        Recording rec = generate_recording(seed + static_cast<uint64_t>(i), frames, snr);
        const std::string name = rec.id + ".afr";
        write_recording((fs::path(out) / name).string(), rec);
        names.push_back(name);
    }
    // 80/20 split in generation order; a lone recording goes to train.
    const long n_train = std::max<long>(1, (n * 8) / 10);
    write_manifest((fs::path(out) / "train.txt").string(),
                   {names.begin(), names.begin() + n_train});
    write_manifest((fs::path(out) / "val.txt").string(),
                   {names.begin() + n_train, names.end()});
    std::printf("wrote %ld recordings x %ld frames under %s (%ld train / %ld val)\n",
                n, frames, out.c_str(), n_train, n - n_train);
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data,
              const std::string& out) {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
    if (!out.empty()) cfg.checkpoint_dir = out;
    auto train_set = load_set((fs::path(data) / "train.txt").string());
    std::vector<RecordingView> val_set;
    const std::string val_manifest = (fs::path(data) / "val.txt").string();
    if (fs::exists(val_manifest)) val_set = load_set(val_manifest);

    TrainResult r = train(cfg, train_set, val_set);
    std::printf("trained %ld steps, final loss %.6g\n", r.steps_run, r.final_loss);
    std::printf("curve: %s\n", r.curve_path.c_str());
    std::printf("final checkpoint: %s\n", r.final_checkpoint.c_str());
    if (!r.best_checkpoint.empty())
        std::printf("best checkpoint: %s (val CCC a=%.4f v=%.4f)\n",
                    r.best_checkpoint.c_str(), r.best_val_ccc_a, r.best_val_ccc_v);
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data,
             const std::string& report_dir) {
    std::string manifest = data;
    if (fs::is_directory(data)) {
        manifest = (fs::path(data) / "val.txt").string();
        if (!fs::exists(manifest))
            throw DataError("no val.txt under " + data +
                            "; pass a manifest file explicitly");
    }
    auto recs = load_set(manifest);

    ModelParams params = make_model(peek_checkpoint_config(ckpt), 0);
    AdamState st = make_adam(parameters(params));
    load_checkpoint(ckpt, params, st);

    std::vector<PredRow> rows;
    EvalReport rep = evaluate_model(params, recs, &rows);

    fs::create_directories(report_dir);
    const fs::path dir(report_dir);
    write_predictions_csv((dir / "predictions.csv").string(), rows);
    write_report_csv((dir / "report.csv").string(), rep);
    write_report_text((dir / "report.txt").string(), rep);

    std::printf("frames %ld  E_a %.6f  E_v %.6f  E_av %.6f  CCC_a %.4f  CCC_v %.4f\n",
                rep.frames, rep.Ea, rep.Ev, rep.Eav, rep.ccc_a, rep.ccc_v);
    std::printf("report written under %s\n", report_dir.c_str());
    return 0;
}

int cmd_ablate(const std::string& name, const std::string& config_path,
               const std::string& out) {
    TrainConfig base = config_path.empty() ? TrainConfig{} : load_config(config_path);
    if (!out.empty()) base.checkpoint_dir = out;
    EvalReport rep = run_ablation(name, base);
    std::printf("%s: frames %ld  E_a %.6f  E_v %.6f  E_av %.6f  CCC_a %.4f  CCC_v %.4f\n",
                name.c_str(), rep.frames, rep.Ea, rep.Ev, rep.Eav, rep.ccc_a,
                rep.ccc_v);
    return 0;
}

int cmd_gradcheck() {
    auto results = run_gradient_suite();
    for (const auto& r : results)
        std::printf("%-28s max rel err %.3e  %s\n", r.name.c_str(), r.max_rel_err,
                    r.pass ? "pass" : "FAIL");
    if (!all_pass(results)) {
        std::fprintf(stderr, "gradient verification failed\n");
        return 4;
    }
    std::printf("all %zu gradient checks passed\n", results.size());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dimensional affect recognition on synthetic audiovisual recordings"};
    app.require_subcommand(1);

    uint64_t gen_seed = 1;
    long gen_recs = 10, gen_frames = 200;
    std::string gen_out = "data";
    double gen_pixel_noise = 0.0, gen_audio_noise = 0.0;
    auto* gen = app.add_subcommand("generate",
                                   "write synthetic recordings plus train/val manifests");
    gen->add_option("--seed", gen_seed, "base seed; recording i uses seed+i");
    gen->add_option("--recordings", gen_recs, "number of recordings");
    gen->add_option("--frames", gen_frames, "frames per recording");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--pixel-noise", gen_pixel_noise, "additive pixel noise stddev");
    gen->add_option("--audio-noise", gen_audio_noise, "additive waveform noise stddev");

    std::string train_config, train_data, train_out;
    auto* tr = app.add_subcommand("train", "optimize a model on generated data");
    tr->add_option("--config", train_config, "key=value config file");
    tr->add_option("--data", train_data, "directory holding train.txt/val.txt")
        ->required();
    tr->add_option("--out", train_out, "checkpoint/curve directory (default from config)");

    std::string eval_ckpt, eval_data, eval_report = "report";
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev->add_option("--checkpoint", eval_ckpt, "AFCK checkpoint path")->required();
    ev->add_option("--data", eval_data, "manifest file or directory with val.txt")
        ->required();
    ev->add_option("--report", eval_report, "report output directory");

    std::string ab_name, ab_config, ab_out;
    auto* ab = app.add_subcommand("ablate", "train and evaluate one named variant");
    ab->add_option("--name", ab_name,
                   "full | visual-only | audio-only | no-autoencoder | hidden-<n>")
        ->required();
    ab->add_option("--config", ab_config, "base key=value config file");
    ab->add_option("--out", ab_out, "work directory (default from config)");

    app.add_subcommand("gradcheck", "run the numeric gradient verification suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed())
            return cmd_generate(gen_seed, gen_recs, gen_frames, gen_out,
                                gen_pixel_noise, gen_audio_noise);
        if (tr->parsed()) return cmd_train(train_config, train_data, train_out);
        if (ev->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_report);
        if (ab->parsed()) return cmd_ablate(ab_name, ab_config, ab_out);
        return cmd_gradcheck();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "shape error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    }
}
