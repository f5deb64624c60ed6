#ifndef AFFECT_DATA_HPP
#define AFFECT_DATA_HPP

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "affect/tensor.hpp"

namespace affect {

inline constexpr long kImageH = 96;
inline constexpr long kImageW = 96;
inline constexpr long kImageC = 3;
inline constexpr long kImagePixels = kImageH * kImageW * kImageC;
inline constexpr long kAudioLen = 640;          // 0.04 s at 16 kHz
inline constexpr long kSampleRate = 16000;
inline constexpr long kFrameRate = 25;          // one audio frame per video frame
inline constexpr long kWindowK = 4;             // precedent frames per prediction

// Storage is float32, frame-major; training reads through RecordingView and
// widens to f64 only at batch assembly.
struct Recording {
    std::string id;
    long frames = 0;
    std::vector<float> images;   // frames * kImagePixels
    std::vector<float> audio;    // frames * kAudioLen
    std::vector<float> labels;   // frames * 2, (arousal, valence) pairs
};

struct SnrConfig {
    double pixel_noise = 0.0;    // additive stddev on pixels
    double audio_noise = 0.0;    // additive stddev on waveform samples
};

// Affine [0,full_scale] -> [-1,1]; out-of-range input is refused.
std::vector<double> normalize_image(const std::vector<double>& raw, double full_scale = 255.0);

// Zero mean, unit population variance over the whole recording.
std::vector<double> normalize_audio(const std::vector<double>& waveform);

// Consecutive non-overlapping 640-sample frames; the remainder is dropped.
std::vector<std::vector<double>> frame_audio(const std::vector<double>& waveform);

// Blob position <- valence, blob intensity <- arousal, sine amplitude <-
// arousal, sine frequency <- valence; labels are the latent walks themselves.
Recording generate_recording(uint64_t seed, long frames, const SnrConfig& snr);

void write_recording(const std::string& path, const Recording& rec);
Recording read_recording(const std::string& path);

// Read-only handle over a recording, either owned or a mapped "AFR1" file.
class RecordingView {
public:
    RecordingView() = default;
    static RecordingView map_file(const std::string& path);
    static RecordingView from_memory(Recording rec);

    bool defined() const { return static_cast<bool>(impl_); }
    const std::string& id() const;
    long frames() const;
    const float* image(long t) const;      // kImagePixels floats
    const float* audio(long t) const;      // kAudioLen floats
    float arousal(long t) const;
    float valence(long t) const;

private:
    struct Impl;
    std::shared_ptr<const Impl> impl_;
};

// One prediction target: frames [t-k, t] of rec, label at t.
struct Window {
    const RecordingView* rec = nullptr;
    long t = 0;
};

// Windows for t = k .. N-1; a recording shorter than k+1 frames is an error.
std::vector<Window> window_stream(const RecordingView& rec);

// Frame-major stacking, oldest-to-newest inside each window, f32 -> f64.
struct Batch {
    Tensor images;   // {B*(k+1), 96, 96, 3}
    Tensor audio;    // {B*(k+1), 640, 1}
    Tensor labels;   // {B, 2}
    long batch = 0;
    long steps = 0;  // k+1
};
Batch assemble_batch(const std::vector<Window>& windows);

// One recording path per line; blank lines ignored. Relative paths are
// resolved against the manifest's directory.
std::vector<std::string> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<std::string>& entries);

} // namespace affect

#endif
