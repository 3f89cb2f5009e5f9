#include "sdit/audio.hpp"

#include <cstring>
#include <fstream>

namespace sdit {

namespace {
constexpr char kMagic[5] = {'A', 'T', 'R', 'K', '1'};

template <typename T>
void write_pod(std::ofstream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw IoError(std::string("track file truncated while reading ") + what);
    return value;
}
}  // namespace

void AudioMask::validate() const {
    for (uint8_t v : values) {
        if (v != 0 && v != 1) throw ValidationError("AudioMask: values must be binary");
    }
}

void AudioTrack::validate() const {
    mask.validate();
    if (features.shape().size() != 2) throw ShapeError("AudioTrack: features must be 2D");
    if (features.rows() != mask.frames()) {
        throw ValidationError("AudioTrack: feature frame count must equal mask length");
    }
}

AudioTrack AudioTrack::slice(int start, int count) const {
    if (start < 0 || count <= 0 || start + count > frames()) {
        throw ValidationError("AudioTrack::slice: range out of bounds");
    }
    AudioTrack out;
    out.features = slice_rows(features, start, count);
    out.mask.values.assign(mask.values.begin() + start, mask.values.begin() + start + count);
    return out;
}

RoutedAudio apply_mask(const AudioTrack& track) {
    track.validate();
    const int f = track.frames();
    const int d = track.audio_dim();
    std::vector<double> talk(static_cast<size_t>(f) * d);
    std::vector<double> listen(static_cast<size_t>(f) * d);
    const auto& feat = track.features.data();
    for (int i = 0; i < f; ++i) {
        const double m = track.mask.values[i];
        for (int j = 0; j < d; ++j) {
            const double v = feat[static_cast<size_t>(i) * d + j];
            talk[static_cast<size_t>(i) * d + j] = v * m;
            listen[static_cast<size_t>(i) * d + j] = v * (1.0 - m);
        }
    }
    return {Tensor::from({f, d}, std::move(talk)), Tensor::from({f, d}, std::move(listen))};
}

AudioTrack synth_features(uint64_t seed, int frames, int audio_dim, int mask_pattern) {
    if (frames <= 0 || audio_dim <= 0) {
        throw ValidationError("synth_features: frames and audio_dim must be positive");
    }
    Rng rng(seed);
    // Smoothed random walk: x_t = a*x_{t-1} + (1-a)*noise, per dim.
    constexpr double kSmooth = 0.85;
    std::vector<double> feat(static_cast<size_t>(frames) * audio_dim);
    std::vector<double> state(audio_dim);
    for (auto& s : state) s = rng.normal();
    for (int t = 0; t < frames; ++t) {
        for (int j = 0; j < audio_dim; ++j) {
            state[j] = kSmooth * state[j] + (1.0 - kSmooth) * rng.normal();
            feat[static_cast<size_t>(t) * audio_dim + j] = state[j];
        }
    }
    AudioTrack track;
    track.features = Tensor::from({frames, audio_dim}, std::move(feat));
    track.mask.values.resize(frames);
    for (int t = 0; t < frames; ++t) {
        track.mask.values[t] = mask_pattern <= 0 ? 1 : static_cast<uint8_t>((t / mask_pattern) % 2 == 0);
    }
    return track;
}

void save_track(const AudioTrack& track, const std::string& path) {
    track.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open track file for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_pod<uint32_t>(out, static_cast<uint32_t>(track.frames()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(track.audio_dim()));
    for (double v : track.features.data()) write_pod<float>(out, static_cast<float>(v));
    for (uint8_t m : track.mask.values) write_pod<uint8_t>(out, m);
    if (!out) throw IoError("failed writing track file: " + path);
}

AudioTrack load_track(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open track file: " + path);
    char magic[5];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError("malformed track file (bad magic): " + path);
    }
    const auto frames = read_pod<uint32_t>(in, "frame count");
    const auto dim = read_pod<uint32_t>(in, "audio_dim");
    if (frames == 0 || dim == 0) throw ValidationError("track file declares empty dimensions");
    std::vector<double> feat(static_cast<size_t>(frames) * dim);
    for (auto& v : feat) v = read_pod<float>(in, "features");
    AudioTrack track;
    track.features = Tensor::from({static_cast<int>(frames), static_cast<int>(dim)}, std::move(feat));
    track.mask.values.resize(frames);
    for (auto& m : track.mask.values) m = read_pod<uint8_t>(in, "mask");
    for (uint8_t m : track.mask.values) {
        if (m != 0 && m != 1) throw ValidationError("track file mask values must be binary");
    }
    track.validate();
    return track;
}

}  // namespace sdit
