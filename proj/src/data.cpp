#include "affect/data.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

namespace affect {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'R', '1'};
constexpr uint32_t kFormatVersion = 1;

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace

std::vector<double> normalize_image(const std::vector<double>& raw, double full_scale) {
    std::vector<double> out(raw.size());
    for (size_t i = 0; i < raw.size(); ++i) {
        if (raw[i] < 0 || raw[i] > full_scale)
            throw DataError("pixel value " + std::to_string(raw[i]) + " outside [0, " +
                            std::to_string(full_scale) + "]");
        out[i] = 2.0 * (raw[i] / full_scale) - 1.0;
    }
    return out;
}

std::vector<double> normalize_audio(const std::vector<double>& waveform) {
    if (waveform.size() < 2)
        throw DataError("waveform too short to normalize (" +
                        std::to_string(waveform.size()) + " samples)");
    const auto [lo, hi] = std::minmax_element(waveform.begin(), waveform.end());
    if (*lo == *hi) throw DataError("constant waveform cannot be normalized");
    const double mu = mean_of(waveform);
    double var = 0;
    for (double x : waveform) var += (x - mu) * (x - mu);
    var /= static_cast<double>(waveform.size());
    const double inv = 1.0 / std::sqrt(var);
    std::vector<double> out(waveform.size());
    for (size_t i = 0; i < waveform.size(); ++i) out[i] = (waveform[i] - mu) * inv;
    return out;
}

std::vector<std::vector<double>> frame_audio(const std::vector<double>& waveform) {
    if (static_cast<long>(waveform.size()) < kAudioLen)
        throw DataError("waveform of " + std::to_string(waveform.size()) +
                        " samples is shorter than one frame (" + std::to_string(kAudioLen) + ")");
    const long n = static_cast<long>(waveform.size()) / kAudioLen;
    std::vector<std::vector<double>> frames(static_cast<size_t>(n));
    for (long t = 0; t < n; ++t)
        frames[t].assign(waveform.begin() + t * kAudioLen,
                         waveform.begin() + (t + 1) * kAudioLen);
    return frames;
}

Recording generate_recording(uint64_t seed, long frames, const SnrConfig& snr) {
    if (frames < kWindowK + 1)
        throw DataError("recording needs at least " + std::to_string(kWindowK + 1) + " frames");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u_start(-0.5, 0.5);
    std::normal_distribution<double> walk_noise(0.0, 0.05);

    // Latent affect trajectories: independent mean-reverting walks.
    std::vector<double> a(frames), v(frames);
    a[0] = u_start(rng);
    v[0] = u_start(rng);
    for (long t = 1; t < frames; ++t) {
        a[t] = std::clamp(a[t - 1] - 0.05 * a[t - 1] + walk_noise(rng), -1.0, 1.0);
        v[t] = std::clamp(v[t - 1] - 0.05 * v[t - 1] + walk_noise(rng), -1.0, 1.0);
    }

    Recording rec;
    rec.id = "synthetic-" + std::to_string(seed);
    rec.frames = frames;
    rec.images.resize(static_cast<size_t>(frames) * kImagePixels);
    rec.audio.resize(static_cast<size_t>(frames) * kAudioLen);
    rec.labels.resize(static_cast<size_t>(frames) * 2);

    std::normal_distribution<double> pix_noise(0.0, 1.0);
    const double blob_sigma = 10.0;
    const double chan[kImageC] = {1.0, 0.75, 0.5};
    for (long t = 0; t < frames; ++t) {
        const double cx = (v[t] + 1.0) * 0.5 * (kImageW - 1);
        const double cy = 0.5 * (kImageH - 1);
        const double amp = 1.6 * (a[t] + 1.0) * 0.5;
        float* img = rec.images.data() + t * kImagePixels;
        for (long y = 0; y < kImageH; ++y)
            for (long x = 0; x < kImageW; ++x) {
                const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                const double g = amp * std::exp(-d2 / (2.0 * blob_sigma * blob_sigma));
                for (long c = 0; c < kImageC; ++c) {
                    double p = -1.0 + g * chan[c];
                    if (snr.pixel_noise > 0) p += snr.pixel_noise * pix_noise(rng);
                    img[(y * kImageW + x) * kImageC + c] =
                        static_cast<float>(std::clamp(p, -1.0, 1.0));
                }
            }
    }

    // Phase-continuous tone over the whole recording, then one normalization.
    std::normal_distribution<double> wav_noise(0.0, 1.0);
    std::vector<double> wave(static_cast<size_t>(frames) * kAudioLen);
    double phase = 0.0;
    for (long t = 0; t < frames; ++t) {
        const double amp = (a[t] + 1.0) * 0.5;
        const double freq = 220.0 * std::pow(2.0, v[t]);
        const double dphase = 2.0 * M_PI * freq / kSampleRate;
        for (long s = 0; s < kAudioLen; ++s) {
            phase += dphase;
            double x = amp * std::sin(phase);
            if (snr.audio_noise > 0) x += snr.audio_noise * wav_noise(rng);
            wave[t * kAudioLen + s] = x;
        }
    }
    std::vector<double> norm = normalize_audio(wave);
    for (size_t i = 0; i < norm.size(); ++i) rec.audio[i] = static_cast<float>(norm[i]);

    for (long t = 0; t < frames; ++t) {
        rec.labels[t * 2 + 0] = static_cast<float>(a[t]);
        rec.labels[t * 2 + 1] = static_cast<float>(v[t]);
    }
    return rec;
}

// ------------------------------------------------------------------ files

namespace {

struct Header {
    uint32_t version = kFormatVersion;
    uint32_t frames = 0;
    uint32_t h = kImageH, w = kImageW, c = kImageC;
    uint32_t audio_len = kAudioLen;
    std::string id;

    long header_bytes() const { return 4 + 4 * 7 + static_cast<long>(id.size()); }
    long frame_bytes() const { return (h * w * c + audio_len) * 4L; }
    long payload_bytes() const { return frames * (frame_bytes() + 8L); }
    long total_bytes() const { return header_bytes() + payload_bytes(); }
};

// Parses and validates the fixed part of the header from a raw buffer.
Header parse_header(const unsigned char* p, size_t size, const std::string& path) {
    auto need = [&](size_t bytes, const char* what) {
        if (size < bytes)
            throw DataError(path + ": truncated " + what + " (file has " +
                            std::to_string(size) + " bytes, needs " + std::to_string(bytes) +
                            ")");
    };
    need(4, "magic");
    if (std::memcmp(p, kMagic, 4) != 0)
        throw DataError(path + ": bad magic, not an AFR1 recording");
    need(32, "header");
    Header hd;
    uint32_t fields[7];
    std::memcpy(fields, p + 4, 28);
    hd.version = fields[0];
    hd.frames = fields[1];
    hd.h = fields[2];
    hd.w = fields[3];
    hd.c = fields[4];
    hd.audio_len = fields[5];
    const uint32_t id_len = fields[6];
    if (hd.version != kFormatVersion)
        throw DataError(path + ": unsupported version " + std::to_string(hd.version));
    if (hd.h != kImageH || hd.w != kImageW || hd.c != kImageC || hd.audio_len != kAudioLen)
        throw DataError(path + ": dimension mismatch (" + std::to_string(hd.h) + "x" +
                        std::to_string(hd.w) + "x" + std::to_string(hd.c) + ", audio " +
                        std::to_string(hd.audio_len) + ")");
    need(32 + id_len, "id");
    hd.id.assign(reinterpret_cast<const char*>(p) + 32, id_len);
    const long want = hd.total_bytes();
    if (static_cast<long>(size) < want)
        throw DataError(path + ": truncated at byte " + std::to_string(size) + ", expected " +
                        std::to_string(want));
    return hd;
}

} // namespace

void write_recording(const std::string& path, const Recording& rec) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out.write(kMagic, 4);
    const uint32_t fields[7] = {kFormatVersion,
                                static_cast<uint32_t>(rec.frames),
                                kImageH,
                                kImageW,
                                kImageC,
                                kAudioLen,
                                static_cast<uint32_t>(rec.id.size())};
    out.write(reinterpret_cast<const char*>(fields), sizeof(fields));
    out.write(rec.id.data(), static_cast<std::streamsize>(rec.id.size()));
    for (long t = 0; t < rec.frames; ++t) {
        out.write(reinterpret_cast<const char*>(rec.images.data() + t * kImagePixels),
                  kImagePixels * 4);
        out.write(reinterpret_cast<const char*>(rec.audio.data() + t * kAudioLen),
                  kAudioLen * 4);
    }
    out.write(reinterpret_cast<const char*>(rec.labels.data()),
              static_cast<std::streamsize>(rec.labels.size() * 4));
    if (!out) throw DataError("short write to " + path);
}

struct RecordingView::Impl {
    Recording owned;
    const unsigned char* map = nullptr;
    size_t map_size = 0;
    std::string id;
    long frames = 0;
    long frame_stride = 0;   // floats per frame in the mapped payload
    const float* payload = nullptr;
    const float* labels = nullptr;

    ~Impl() {
        if (map) ::munmap(const_cast<unsigned char*>(map), map_size);
    }
};

RecordingView RecordingView::map_file(const std::string& path) {
    int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) throw DataError("cannot open " + path);
    struct stat st{};
    if (::fstat(fd, &st) != 0) {
        ::close(fd);
        throw DataError("cannot stat " + path);
    }
    void* mem = ::mmap(nullptr, static_cast<size_t>(st.st_size), PROT_READ, MAP_PRIVATE, fd, 0);
    ::close(fd);
    if (mem == MAP_FAILED) throw DataError("cannot map " + path);
    auto impl = std::make_shared<Impl>();
    impl->map = static_cast<const unsigned char*>(mem);
    impl->map_size = static_cast<size_t>(st.st_size);
    // On a parse error impl's destructor unmaps.
    Header hd = parse_header(impl->map, impl->map_size, path);
    impl->id = hd.id;
    impl->frames = hd.frames;
    impl->frame_stride = kImagePixels + kAudioLen;
    impl->payload = reinterpret_cast<const float*>(impl->map + hd.header_bytes());
    impl->labels = impl->payload + static_cast<long>(hd.frames) * impl->frame_stride;
    RecordingView v;
    v.impl_ = std::move(impl);
    return v;
}

RecordingView RecordingView::from_memory(Recording rec) {
    auto impl = std::make_shared<Impl>();
    impl->owned = std::move(rec);
    impl->id = impl->owned.id;
    impl->frames = impl->owned.frames;
    RecordingView v;
    v.impl_ = std::move(impl);
    return v;
}

const std::string& RecordingView::id() const { return impl_->id; }
long RecordingView::frames() const { return impl_->frames; }

const float* RecordingView::image(long t) const {
    if (impl_->payload) return impl_->payload + t * impl_->frame_stride;
    return impl_->owned.images.data() + t * kImagePixels;
}

const float* RecordingView::audio(long t) const {
    if (impl_->payload) return impl_->payload + t * impl_->frame_stride + kImagePixels;
    return impl_->owned.audio.data() + t * kAudioLen;
}

float RecordingView::arousal(long t) const {
    if (impl_->labels) return impl_->labels[t * 2];
    return impl_->owned.labels[t * 2];
}

float RecordingView::valence(long t) const {
    if (impl_->labels) return impl_->labels[t * 2 + 1];
    return impl_->owned.labels[t * 2 + 1];
}

Recording read_recording(const std::string& path) {
    RecordingView v = RecordingView::map_file(path);
    Recording rec;
    rec.id = v.id();
    rec.frames = v.frames();
    rec.images.resize(static_cast<size_t>(rec.frames) * kImagePixels);
    rec.audio.resize(static_cast<size_t>(rec.frames) * kAudioLen);
    rec.labels.resize(static_cast<size_t>(rec.frames) * 2);
    for (long t = 0; t < rec.frames; ++t) {
        std::memcpy(rec.images.data() + t * kImagePixels, v.image(t), kImagePixels * 4);
        std::memcpy(rec.audio.data() + t * kAudioLen, v.audio(t), kAudioLen * 4);
        rec.labels[t * 2] = v.arousal(t);
        rec.labels[t * 2 + 1] = v.valence(t);
    }
    return rec;
}

std::vector<Window> window_stream(const RecordingView& rec) {
    if (rec.frames() < kWindowK + 1)
        throw DataError("recording " + rec.id() + " has " + std::to_string(rec.frames()) +
                        " frames, needs at least " + std::to_string(kWindowK + 1));
    std::vector<Window> ws;
    ws.reserve(static_cast<size_t>(rec.frames() - kWindowK));
    for (long t = kWindowK; t < rec.frames(); ++t) ws.push_back({&rec, t});
    return ws;
}

Batch assemble_batch(const std::vector<Window>& windows) {
    if (windows.empty()) throw DataError("empty batch");
    const long B = static_cast<long>(windows.size());
    const long S = kWindowK + 1;
    Batch b;
    b.batch = B;
    b.steps = S;
    b.images = Tensor::zeros({B * S, kImageH, kImageW, kImageC});
    b.audio = Tensor::zeros({B * S, kAudioLen, 1});
    b.labels = Tensor::zeros({B, 2});
    double* pi = b.images.data();
    double* pa = b.audio.data();
    double* pl = b.labels.data();
    for (long i = 0; i < B; ++i) {
        const Window& w = windows[static_cast<size_t>(i)];
        for (long s = 0; s < S; ++s) {
            const long t = w.t - kWindowK + s;
            const float* img = w.rec->image(t);
            const float* aud = w.rec->audio(t);
            double* di = pi + (i * S + s) * kImagePixels;
            double* da = pa + (i * S + s) * kAudioLen;
            for (long j = 0; j < kImagePixels; ++j) di[j] = img[j];
            for (long j = 0; j < kAudioLen; ++j) da[j] = aud[j];
        }
        pl[i * 2] = windows[i].rec->arousal(w.t);
        pl[i * 2 + 1] = windows[i].rec->valence(w.t);
    }
    return b;
}

std::vector<std::string> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) continue;
        std::filesystem::path p(line);
        out.push_back(p.is_absolute() ? p.string() : (base / p).string());
    }
    return out;
}

void write_manifest(const std::string& path, const std::vector<std::string>& entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open manifest " + path + " for writing");
    for (const auto& e : entries) out << e << "\n";
    if (!out) throw DataError("short write to manifest " + path);
}

} // namespace affect
