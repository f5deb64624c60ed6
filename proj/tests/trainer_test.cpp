#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "affect/trainer.hpp"

using namespace affect;
using doctest::Approx;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& leaf) {
    fs::path p = fs::temp_directory_path() / ("affect_trainer_" + leaf);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::vector<RecordingView> make_set(uint64_t seed, long n, long frames) {
    std::vector<RecordingView> out;
    for (long i = 0; i < n; ++i)
        out.push_back(RecordingView::from_memory(
            generate_recording(seed + static_cast<uint64_t>(i), frames, SnrConfig{0.05, 0.05})));
    return out;
}

TrainConfig small_run(const std::string& dir) {
    TrainConfig c;
    c.preset = "slim";
    c.batch_size = 2;
    c.max_steps = 3;
    c.lr = 1e-3;
    c.eval_interval = 2;
    c.checkpoint_dir = dir;
    return c;
}

double group_grad_l1(const ModelParams& p, const std::string& prefix) {
    double sum = 0;
    for (const auto& np : named_parameters(p)) {
        if (np.name.rfind(prefix, 0) != 0) continue;
        if (!np.tensor.has_grad()) continue;
        for (double g : np.tensor.grad()) sum += std::abs(g);
    }
    return sum;
}

// One taped step on a synthetic batch sized for the tiny geometry.
ModelParams backward_once(const LossWeights& w) {
    ModelParams p = make_model(ModelConfig::tiny(), 7);
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(-1, 1);
    auto fill = [&](Shape s) {
        long n = 1;
        for (long d : s) n *= d;
        std::vector<double> v(static_cast<size_t>(n));
        for (auto& x : v) x = u(rng);
        return Tensor::from(std::move(s), std::move(v));
    };
    Batch b;
    b.batch = 2;
    b.steps = kWindowK + 1;
    b.images = fill({10, 4, 4, 3});
    b.audio = fill({10, 16, 1});
    b.labels = fill({2, 2});

    Tape tape;
    Forward f = forward_batch(b, p);
    LossBreakdown loss = total_loss(f, b, w);
    tape.backward(loss.total);
    return p;
}

} // namespace

// ------------------------------------------------------------ configuration

TEST_CASE("config text round-trips through serialize and parse") {
    TrainConfig c;
    c.alpha = 0.5;
    c.beta = 2.25;
    c.gamma = 0.125;
    c.lr = 3e-3;
    c.batch_size = 7;
    c.max_steps = 123;
    c.seed = 987654321;
    c.lstm_hidden = 64;
    c.eval_interval = 11;
    c.checkpoint_dir = "runs/exp4";
    c.preset = "slim";
    c.ablation = "audio-only";
    c.feedback_predictions = true;
    c.clip_norm = 5.0;
    c.overfit_windows = 9;
    c.stop_ccc_a = 0.6;
    c.stop_ccc_v = 0.55;
    c.resume_from = "runs/exp3/final.afck";

    TrainConfig d = parse_config(serialize_config(c));
    CHECK(serialize_config(d) == serialize_config(c));
    CHECK(d.alpha == c.alpha);
    CHECK(d.lr == c.lr);
    CHECK(d.seed == c.seed);
    CHECK(d.ablation == c.ablation);
    CHECK(d.resume_from == c.resume_from);
}

TEST_CASE("config parsing ignores comments and blank space") {
    TrainConfig c = parse_config(
        "# an experiment\n"
        "\n"
        "  lr=0.001   \n"
        "batch_size=4 # small batches\n"
        "preset=slim\n");
    CHECK(c.lr == Approx(1e-3));
    CHECK(c.batch_size == 4);
    CHECK(c.preset == "slim");
    CHECK(c.alpha == 1.0); // untouched default
}

TEST_CASE("config parsing refuses malformed input") {
    CHECK_THROWS_AS(parse_config("frobnicate=1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("just a line without equals\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("lr=fast\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("batch_size=2.5\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("feedback_predictions=maybe\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("lr=-1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("batch_size=0\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("k=5\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("preset=tiny\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("preset=huge\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("ablation=text-only\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("eval_interval=0\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("clip_norm=-2\n"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/path.cfg"), ConfigError);
}

TEST_CASE("presets and ablations resolve to the right architecture") {
    TrainConfig c;
    c.preset = "slim";
    ModelConfig full = model_config(c);
    CHECK(full.latent2d == 512);
    CHECK(full.lstm_hidden == 128);
    CHECK(full.fused_dim() == 1024);
    CHECK(full.use_decoders);

    c.lstm_hidden = 64;
    CHECK(model_config(c).lstm_hidden == 64);
    c.lstm_hidden = 0;

    c.ablation = "visual-only";
    ModelConfig vis = model_config(c);
    CHECK_FALSE(vis.use_audio);
    CHECK(vis.use_visual);
    CHECK(vis.fused_dim() == 512);

    c.ablation = "audio-only";
    ModelConfig aud = model_config(c);
    CHECK_FALSE(aud.use_visual);
    CHECK(aud.fused_dim() == aud.audio_tap());

    c.ablation = "no-autoencoder";
    ModelConfig enc = model_config(c);
    CHECK_FALSE(enc.use_decoders);
    CHECK(enc.use_visual);
    CHECK(enc.use_audio);

    c.preset = "paper";
    c.ablation = "full";
    ModelConfig paper = model_config(c);
    CHECK(paper.latent2d == 2048);
    CHECK(paper.fused_dim() == 3328);
    CHECK(paper.lstm_hidden == 512);

    c.feedback_predictions = true;
    CHECK(model_config(c).lstm_input() == 3330);
}

TEST_CASE("architecture lines round-trip every field") {
    ModelConfig c = ModelConfig::tiny();
    c.use_audio = false;
    c.feedback_predictions = true;
    c.slope = 0.11;
    ModelConfig d = parse_model_config(serialize_model_config(c));
    CHECK(serialize_model_config(d) == serialize_model_config(c));
    CHECK(d.image_size == 4);
    CHECK(d.audio_len == 16);
    CHECK_FALSE(d.use_audio);
    CHECK(d.feedback_predictions);
    CHECK(d.slope == Approx(0.11).epsilon(1e-15));

    CHECK_THROWS_AS(parse_model_config("latent2d"), ConfigError);
    CHECK_THROWS_AS(parse_model_config("wingspan=3"), ConfigError);
}

// ------------------------------------------------------------ optimizer

TEST_CASE("adam leaves parameters alone when no gradient arrived") {
    Tensor t = Tensor::param({3}, {1.0, -2.0, 0.5});
    std::vector<Tensor> params{t};
    AdamState st = make_adam(params);
    adam_step(params, st, 1e-2);
    CHECK(st.step == 1);
    CHECK(t.values() == std::vector<double>{1.0, -2.0, 0.5});
    adam_step(params, st, 1e-2);
    CHECK(st.step == 2);
    CHECK(t.values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("the first adam step moves each coordinate by about lr") {
    Tensor t = Tensor::param({4}, {0.0, 0.0, 0.0, 0.0});
    std::vector<Tensor> params{t};
    AdamState st = make_adam(params);
    t.grad() = {1.0, -2.0, 0.5, -0.25};
    const double lr = 1e-3;
    adam_step(params, st, lr);
    // Bias-corrected m/v give g/(|g|+eps'): each step is -lr*sign(g) almost exactly.
    CHECK(t.values()[0] == Approx(-lr).epsilon(1e-6));
    CHECK(t.values()[1] == Approx(lr).epsilon(1e-6));
    CHECK(t.values()[2] == Approx(-lr).epsilon(1e-6));
    CHECK(t.values()[3] == Approx(lr).epsilon(1e-6));
}

TEST_CASE("adam drives a quadratic bowl to the origin") {
    Tensor theta = Tensor::param({4}, {1.0, -2.0, 0.5, -1.5});
    Tensor target = Tensor::zeros({4});
    std::vector<Tensor> params{theta};
    AdamState st = make_adam(params);
    double loss_val = 0;
    for (int step = 0; step < 400; ++step) {
        Tape tape;
        Tensor loss = ops::sum_squared_diff(theta, target);
        loss_val = loss.item();
        tape.backward(loss);
        adam_step(params, st, 1e-2);
        theta.free_grad();
    }
    CHECK(loss_val < 1e-2);
    for (double v : theta.values()) CHECK(std::abs(v) < 1e-1);
}

TEST_CASE("gradient clipping rescales only oversized gradients") {
    Tensor a = Tensor::param({2}, {0.0, 0.0});
    Tensor b = Tensor::param({1}, {0.0});
    a.grad() = {3.0, 0.0};
    b.grad() = {4.0};
    std::vector<Tensor> params{a, b};

    clip_gradients(params, 10.0); // norm 5 <= 10: untouched
    CHECK(a.grad()[0] == 3.0);
    CHECK(b.grad()[0] == 4.0);

    clip_gradients(params, 2.0); // norm 5 -> scale 0.4
    CHECK(a.grad()[0] == Approx(1.2).epsilon(1e-12));
    CHECK(a.grad()[1] == 0.0);
    CHECK(b.grad()[0] == Approx(1.6).epsilon(1e-12));

    // A parameter with no gradient is simply skipped.
    Tensor c = Tensor::param({2}, {1.0, 1.0});
    std::vector<Tensor> with_missing{a, c};
    clip_gradients(with_missing, 0.5);
    CHECK_FALSE(c.has_grad());
}

// ------------------------------------------------------------ gradient routing

TEST_CASE("the joint loss reaches every parameter group") {
    ModelParams p = backward_once(LossWeights{});
    for (const std::string& g :
         {"enc2d.", "dec2d.", "enc1d.", "dec1d.", "lstm.", "head."})
        CHECK(group_grad_l1(p, g) > 0.0);
}

TEST_CASE("without reconstruction weight the decoders receive nothing") {
    ModelParams p = backward_once(LossWeights{0.0, 0.0, 1.0});
    CHECK(group_grad_l1(p, "dec2d.") == 0.0);
    CHECK(group_grad_l1(p, "dec1d.") == 0.0);
    CHECK(group_grad_l1(p, "enc2d.") > 0.0);
    CHECK(group_grad_l1(p, "lstm.") > 0.0);
    CHECK(group_grad_l1(p, "head.") > 0.0);
}

TEST_CASE("without concordance weight the temporal head receives nothing") {
    ModelParams p = backward_once(LossWeights{1.0, 1.0, 0.0});
    CHECK(group_grad_l1(p, "lstm.") == 0.0);
    CHECK(group_grad_l1(p, "head.") == 0.0);
    CHECK(group_grad_l1(p, "enc2d.") > 0.0);
    CHECK(group_grad_l1(p, "dec2d.") > 0.0);
}

// ------------------------------------------------------------ checkpoints

TEST_CASE("checkpoints survive a bitwise round-trip") {
    fs::path dir = fresh_dir("ckpt");
    ModelConfig mc = ModelConfig::tiny();
    ModelParams p = make_model(mc, 17);
    std::vector<Tensor> tensors = parameters(p);
    AdamState st = make_adam(tensors);
    st.step = 5;
    st.m[0][0] = 0.125;
    st.v[2][1] = 3.5e-7;

    const std::string path = (dir / "a.afck").string();
    save_checkpoint(path, p, st);

    ModelParams q = make_model(mc, 999); // different values, same wiring
    AdamState st2 = make_adam(parameters(q));
    load_checkpoint(path, q, st2);
    CHECK(st2.step == 5);
    CHECK(st2.m[0][0] == 0.125);
    CHECK(st2.v[2][1] == 3.5e-7);
    auto np = named_parameters(p), nq = named_parameters(q);
    for (size_t i = 0; i < np.size(); ++i)
        CHECK(np[i].tensor.values() == nq[i].tensor.values());

    const std::string again = (dir / "b.afck").string();
    save_checkpoint(again, q, st2);
    CHECK(slurp(path) == slurp(again));

    ModelConfig peeked = peek_checkpoint_config(path);
    CHECK(serialize_model_config(peeked) == serialize_model_config(mc));
}

TEST_CASE("a checkpoint refuses a model with different widths") {
    fs::path dir = fresh_dir("ckpt_mismatch");
    ModelConfig mc = ModelConfig::tiny();
    ModelParams p = make_model(mc, 17);
    AdamState st = make_adam(parameters(p));
    const std::string path = (dir / "a.afck").string();
    save_checkpoint(path, p, st);

    ModelConfig wider = mc;
    wider.lstm_hidden = 12;
    ModelParams q = make_model(wider, 17);
    AdamState st2 = make_adam(parameters(q));
    CHECK_THROWS_AS(load_checkpoint(path, q, st2), ConfigError);

    ModelConfig fewer = mc;
    fewer.use_decoders = false;
    ModelParams r = make_model(fewer, 17);
    AdamState st3 = make_adam(parameters(r));
    CHECK_THROWS_AS(load_checkpoint(path, r, st3), ConfigError);

    CHECK_THROWS_AS(load_checkpoint((dir / "missing.afck").string(), q, st2), DataError);
}

// ------------------------------------------------------------ training runs

TEST_CASE("two identical runs produce identical curves and weights") {
    auto train_set = make_set(100, 1, 12);
    fs::path d1 = fresh_dir("det1"), d2 = fresh_dir("det2");

    TrainConfig c1 = small_run(d1.string());
    TrainResult r1 = train(c1, train_set, {});
    TrainConfig c2 = small_run(d2.string());
    TrainResult r2 = train(c2, train_set, {});

    CHECK(r1.steps_run == 3);
    CHECK(r1.final_loss == r2.final_loss);
    CHECK(slurp(d1 / "curve.csv") == slurp(d2 / "curve.csv"));
    CHECK(slurp(r1.final_checkpoint) == slurp(r2.final_checkpoint));

    const std::string curve = slurp(d1 / "curve.csv");
    CHECK(curve.rfind("step,total_loss,l2d,l1d,lrec,val_ccc_arousal,val_ccc_valence,"
                      "val_Ea,val_Ev,val_Eav\n", 0) == 0);
    long rows = 0;
    for (char ch : curve)
        if (ch == '\n') ++rows;
    CHECK(rows == 4); // header + one row per step
}

TEST_CASE("a resumed run lands exactly where the uninterrupted one does") {
    auto train_set = make_set(200, 1, 12);
    auto val_set = make_set(300, 1, 7);
    fs::path d1 = fresh_dir("whole"), d2 = fresh_dir("split");

    TrainConfig whole = small_run(d1.string());
    whole.max_steps = 4;
    TrainResult rw = train(whole, train_set, val_set);
    CHECK(rw.steps_run == 4);
    CHECK_FALSE(rw.best_checkpoint.empty());

    TrainConfig first = small_run(d2.string());
    first.max_steps = 2;
    TrainResult rf = train(first, train_set, val_set);
    CHECK(rf.steps_run == 2);

    TrainConfig second = small_run(d2.string());
    second.max_steps = 4;
    second.resume_from = rf.final_checkpoint;
    TrainResult rs = train(second, train_set, val_set);
    CHECK(rs.steps_run == 2);

    CHECK(slurp(rw.final_checkpoint) == slurp(rs.final_checkpoint));
    CHECK(slurp(d1 / "curve.csv") == slurp(d2 / "curve.csv"));
}

TEST_CASE("overfitting a handful of windows drives the loss down") {
    auto train_set = make_set(400, 1, 12);
    fs::path dir = fresh_dir("overfit");

    TrainConfig c = small_run(dir.string());
    c.ablation = "audio-only";
    c.overfit_windows = 2;
    c.max_steps = 40;
    c.lr = 1e-3;
    TrainResult r = train(c, train_set, {});
    CHECK(r.steps_run == 40);

    std::ifstream in(dir / "curve.csv");
    std::string line;
    std::getline(in, line); // header
    std::vector<double> losses;
    while (std::getline(in, line)) {
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        losses.push_back(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
    }
    REQUIRE(losses.size() == 40);
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
        head += losses[static_cast<size_t>(i)];
        tail += losses[losses.size() - 10 + static_cast<size_t>(i)];
    }
    CHECK(tail < head);
    CHECK(r.final_loss < losses.front());
}

TEST_CASE("a diverging run aborts with the failing step in the message") {
    auto train_set = make_set(500, 1, 12);
    fs::path dir = fresh_dir("nan");

    TrainConfig c = small_run(dir.string());
    c.lr = 1e150; // one step catapults the weights out of range
    try {
        train(c, train_set, {});
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("step 2") != std::string::npos);
        CHECK(msg.find("last finite") != std::string::npos);
    }
}

TEST_CASE("single-window batches are rejected while concordance is active") {
    auto train_set = make_set(600, 1, 12);
    TrainConfig c = small_run(fresh_dir("bs1").string());
    c.batch_size = 1;
    CHECK_THROWS_AS(train(c, train_set, {}), ConfigError);
}

TEST_CASE("training requires at least one window") {
    TrainConfig c = small_run(fresh_dir("empty").string());
    CHECK_THROWS_AS(train(c, {}, {}), DataError);
}
