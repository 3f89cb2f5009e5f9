#include "sdit/runtime.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace sdit {

std::map<std::string, std::string> parse_key_value_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        size_t a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos || line[a] == '#') continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValidationError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        auto trim = [](std::string s) {
            size_t b = s.find_first_not_of(" \t\r");
            size_t e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        if (key.empty()) {
            throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
        }
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

std::map<std::string, std::string> parse_key_values(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_key_value_text(buf.str());
}

namespace {

int get_int(const std::map<std::string, std::string>& kv, const std::string& key, int fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (const std::exception&) {
        throw ValidationError("config key '" + key + "': not an integer: " + it->second);
    }
}

double get_double(const std::map<std::string, std::string>& kv, const std::string& key,
                  double fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw ValidationError("config key '" + key + "': not a number: " + it->second);
    }
}

bool get_bool(const std::map<std::string, std::string>& kv, const std::string& key,
              bool fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ValidationError("config key '" + key + "': expected true/false: " + it->second);
}

std::string get_str(const std::map<std::string, std::string>& kv, const std::string& key,
                    const std::string& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

}  // namespace

ModelConfig model_config_from(const std::map<std::string, std::string>& kv) {
    ModelConfig cfg;
    cfg.layers = get_int(kv, "model.layers", cfg.layers);
    cfg.model_dim = get_int(kv, "model.dim", cfg.model_dim);
    cfg.heads = get_int(kv, "model.heads", cfg.heads);
    cfg.head_dim = cfg.model_dim / std::max(cfg.heads, 1);
    cfg.tokens_per_frame = get_int(kv, "model.tokens_per_frame", cfg.tokens_per_frame);
    cfg.latent_dim = get_int(kv, "model.latent_dim", cfg.latent_dim);
    cfg.window_frames = get_int(kv, "model.window_frames", cfg.window_frames);
    cfg.chunk_size = get_int(kv, "model.chunk_size", cfg.chunk_size);
    cfg.audio_dim = get_int(kv, "model.audio_dim", cfg.audio_dim);
    cfg.prompt_tokens = get_int(kv, "model.prompt_tokens", cfg.prompt_tokens);
    cfg.time_embed_dim = get_int(kv, "model.time_embed_dim", cfg.time_embed_dim);
    cfg.rope_theta = get_double(kv, "model.rope_theta", cfg.rope_theta);
    cfg.prediction = prediction_from_string(get_str(kv, "model.prediction", "velocity"));
    cfg.validate();
    return cfg;
}

ModelConfig model_config_from_canonical(const std::string& canonical) {
    std::string text = canonical;
    for (char& ch : text) {
        if (ch == ';') ch = '\n';
    }
    auto kv = parse_key_value_text(text);
    ModelConfig cfg;
    cfg.layers = get_int(kv, "layers", cfg.layers);
    cfg.model_dim = get_int(kv, "model_dim", cfg.model_dim);
    cfg.heads = get_int(kv, "heads", cfg.heads);
    cfg.head_dim = get_int(kv, "head_dim", cfg.head_dim);
    cfg.tokens_per_frame = get_int(kv, "tokens_per_frame", cfg.tokens_per_frame);
    cfg.latent_dim = get_int(kv, "latent_dim", cfg.latent_dim);
    cfg.window_frames = get_int(kv, "window_frames", cfg.window_frames);
    cfg.chunk_size = get_int(kv, "chunk_size", cfg.chunk_size);
    cfg.audio_dim = get_int(kv, "audio_dim", cfg.audio_dim);
    cfg.prompt_tokens = get_int(kv, "prompt_tokens", cfg.prompt_tokens);
    cfg.time_embed_dim = get_int(kv, "time_embed_dim", cfg.time_embed_dim);
    cfg.rope_theta = get_double(kv, "rope_theta", cfg.rope_theta);
    cfg.prediction = prediction_from_string(get_str(kv, "prediction", "velocity"));
    cfg.validate();
    return cfg;
}

CacheConfig cache_config_from(const std::map<std::string, std::string>& kv) {
    CacheConfig cfg;
    cfg.sink_capacity = get_int(kv, "cache.sink", cfg.sink_capacity);
    cfg.window_capacity = get_int(kv, "cache.window", cfg.window_capacity);
    cfg.rapr_cap = get_int(kv, "cache.rapr_cap", cfg.rapr_cap);
    cfg.chunk_size = get_int(kv, "model.chunk_size", cfg.chunk_size);
    cfg.sink_enabled = get_bool(kv, "cache.sink_enabled", cfg.sink_enabled);
    cfg.rapr_enabled = get_bool(kv, "cache.rapr_enabled", cfg.rapr_enabled);
    cfg.validate();
    return cfg;
}

NoiseSchedule schedule_from(const std::map<std::string, std::string>& kv) {
    NoiseSchedule schedule;
    auto it = kv.find("schedule.sigmas");
    if (it != kv.end()) {
        schedule.sigmas.clear();
        std::istringstream is(it->second);
        std::string tok;
        while (std::getline(is, tok, ',')) {
            try {
                schedule.sigmas.push_back(std::stod(tok));
            } catch (const std::exception&) {
                throw ValidationError("config key 'schedule.sigmas': not a number: " + tok);
            }
        }
    }
    schedule.validate();
    return schedule;
}

void PipelineConfig::validate() const {
    if (chunk_seconds <= 0.0) throw ValidationError("PipelineConfig: chunk duration must be > 0");
    if (pixel_dim <= 0) throw ValidationError("PipelineConfig: pixel_dim must be > 0");
    if (decode_delay_seconds < 0.0) {
        throw ValidationError("PipelineConfig: decode delay must be >= 0");
    }
    cache.validate();
    schedule.validate();
}

PipelineConfig PipelineConfig::from(const std::map<std::string, std::string>& kv) {
    PipelineConfig cfg;
    cfg.checkpoint_path = get_str(kv, "checkpoint", "");
    cfg.cache = cache_config_from(kv);
    cfg.schedule = schedule_from(kv);
    cfg.chunk_seconds = get_double(kv, "pipeline.chunk_seconds", cfg.chunk_seconds);
    cfg.clean_recache = get_bool(kv, "pipeline.clean_recache", cfg.clean_recache);
    cfg.pixel_dim = get_int(kv, "pipeline.pixel_dim", cfg.pixel_dim);
    cfg.decode_delay_seconds = get_double(kv, "pipeline.decode_delay", cfg.decode_delay_seconds);
    cfg.simulated_clock = get_bool(kv, "pipeline.simulated_clock", cfg.simulated_clock);
    cfg.sim.denoise_ffd = get_double(kv, "sim.denoise_ffd", cfg.sim.denoise_ffd);
    cfg.sim.denoise_rtf = get_double(kv, "sim.denoise_rtf", cfg.sim.denoise_rtf);
    cfg.sim.decode_ffd = get_double(kv, "sim.decode_ffd", cfg.sim.decode_ffd);
    cfg.sim.decode_rtf = get_double(kv, "sim.decode_rtf", cfg.sim.decode_rtf);
    cfg.seed = static_cast<uint64_t>(get_double(kv, "seed", 0.0));
    cfg.out_path = get_str(kv, "out", "");
    cfg.validate();
    return cfg;
}

DecodeStub::DecodeStub(int latent_dim, int pixel_dim, uint64_t seed, double delay_seconds)
    : delay_(delay_seconds) {
    Rng rng(seed);
    weight_ = Tensor::randn({latent_dim, pixel_dim}, rng,
                            1.0 / std::sqrt(static_cast<double>(latent_dim)));
}

Tensor DecodeStub::decode(const Tensor& chunk_latents) const {
    NoGradGuard ng;
    if (delay_ > 0.0) {
        std::this_thread::sleep_for(std::chrono::duration<double>(delay_));
    }
    return matmul(chunk_latents, weight_);
}

std::string RunMetrics::csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "chunks,denoise_busy_s,denoise_ffd_s,denoise_rtf,decode_busy_s,decode_ffd_s,"
          "decode_rtf,latency_s,forward_count,max_position_index\n";
    os << chunks << ',' << denoise.busy_seconds << ',' << denoise.ffd_seconds << ','
       << denoise.rtf << ',' << decode.busy_seconds << ',' << decode.ffd_seconds << ','
       << decode.rtf << ',' << latency_seconds << ',' << forward_count << ','
       << max_position_index << '\n';
    return os.str();
}

RunMetrics simulate_pipeline(const StageDelays& delays, int num_chunks, double chunk_seconds,
                             int queue_capacity) {
    if (num_chunks <= 0) throw ValidationError("simulate_pipeline: need at least one chunk");
    if (queue_capacity <= 0) throw ValidationError("simulate_pipeline: queue capacity must be > 0");
    std::vector<double> c1(num_chunks), c2(num_chunks), s2(num_chunks);
    for (int i = 0; i < num_chunks; ++i) {
        const double d1 = i == 0 ? delays.denoise_ffd : delays.denoise_rtf * chunk_seconds;
        const double d2 = i == 0 ? delays.decode_ffd : delays.decode_rtf * chunk_seconds;
        double s1 = i > 0 ? c1[i - 1] : 0.0;
        // The producer blocks until the chunk displacing it leaves the queue.
        if (i >= queue_capacity) s1 = std::max(s1, s2[i - queue_capacity]);
        c1[i] = s1 + d1;
        s2[i] = std::max(c1[i], i > 0 ? c2[i - 1] : 0.0);
        c2[i] = s2[i] + d2;
    }
    RunMetrics m;
    m.chunks = num_chunks;
    const double duration = num_chunks * chunk_seconds;
    m.denoise.busy_seconds =
        delays.denoise_ffd + (num_chunks - 1) * delays.denoise_rtf * chunk_seconds;
    m.decode.busy_seconds =
        delays.decode_ffd + (num_chunks - 1) * delays.decode_rtf * chunk_seconds;
    m.denoise.ffd_seconds = c1[0];
    m.decode.ffd_seconds = c2[0];
    m.denoise.rtf = m.denoise.busy_seconds / duration;
    m.decode.rtf = m.decode.busy_seconds / duration;
    m.latency_seconds = m.decode.ffd_seconds + chunk_seconds;
    return m;
}

namespace {

// Ordered bounded handoff between the two stages. push blocks when full,
// pop blocks when empty until the producer closes the queue.
class ChunkQueue {
  public:
    explicit ChunkQueue(size_t capacity) : capacity_(capacity) {}

    void push(Tensor t) {
        std::unique_lock<std::mutex> lock(mu_);
        cv_push_.wait(lock, [&] { return items_.size() < capacity_; });
        items_.push_back(std::move(t));
        cv_pop_.notify_one();
    }

    bool pop(Tensor& out) {
        std::unique_lock<std::mutex> lock(mu_);
        cv_pop_.wait(lock, [&] { return !items_.empty() || closed_; });
        if (items_.empty()) return false;
        out = std::move(items_.front());
        items_.pop_front();
        cv_push_.notify_one();
        return true;
    }

    void close() {
        std::lock_guard<std::mutex> lock(mu_);
        closed_ = true;
        cv_pop_.notify_all();
    }

  private:
    std::mutex mu_;
    std::condition_variable cv_push_, cv_pop_;
    std::deque<Tensor> items_;
    size_t capacity_;
    bool closed_ = false;
};

}  // namespace

StreamResult stream(const AvatarDiT& model, const PipelineConfig& cfg,
                    const Tensor& reference_latent, const AudioTrack& track, int num_chunks,
                    bool concurrent) {
    cfg.validate();
    if (num_chunks <= 0) throw ValidationError("stream: need at least one chunk");
    const ModelConfig& mcfg = model.config();
    const int c = mcfg.chunk_size;
    StreamResult result;
    const int available = (track.frames() - 1) / c;
    if (available <= 0) throw ValidationError("stream: audio track shorter than one chunk");
    if (available < num_chunks) {
        num_chunks = available;
        result.audio_exhausted = true;
    }
    AudioFeatures audio = route_audio(track);
    DecodeStub stub(mcfg.latent_dim, cfg.pixel_dim, cfg.seed ^ 0x9e3779b97f4a7c15ull,
                    cfg.decode_delay_seconds);

    NoGradGuard ng;
    Instrumentation instr;
    RolloutOptions opt;
    opt.schedule = cfg.schedule;
    opt.cache = cfg.cache;
    opt.clean_recache = cfg.clean_recache;
    opt.seed = cfg.seed;
    opt.instr = &instr;

    const auto t0 = std::chrono::steady_clock::now();
    auto since_start = [&t0] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    double denoise_busy = 0.0, decode_busy = 0.0;
    double denoise_first_done = 0.0, decode_first_done = 0.0;

    if (concurrent) {
        ChunkQueue queue(2);
        std::exception_ptr decode_error;
        std::thread consumer([&] {
            try {
                Tensor chunk;
                while (queue.pop(chunk)) {
                    const auto b0 = std::chrono::steady_clock::now();
                    result.pixels.push_back(stub.decode(chunk));
                    decode_busy +=
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - b0)
                            .count();
                    if (result.pixels.size() == 1) decode_first_done = since_start();
                }
            } catch (...) {
                decode_error = std::current_exception();
            }
        });
        opt.on_chunk = [&](int index, const Tensor& chunk) {
            if (index == 0) denoise_first_done = since_start();
            queue.push(chunk);
            return decode_error == nullptr;
        };
        result.latents = rollout(model, reference_latent, audio, num_chunks, opt);
        queue.close();
        consumer.join();
        if (decode_error) std::rethrow_exception(decode_error);
    } else {
        opt.on_chunk = [&](int index, const Tensor& chunk) {
            if (index == 0) denoise_first_done = since_start();
            const auto b0 = std::chrono::steady_clock::now();
            result.pixels.push_back(stub.decode(chunk));
            decode_busy +=
                std::chrono::duration<double>(std::chrono::steady_clock::now() - b0).count();
            if (result.pixels.size() == 1) decode_first_done = since_start();
            return true;
        };
        result.latents = rollout(model, reference_latent, audio, num_chunks, opt);
    }

    for (double s : instr.chunk_wall_seconds) denoise_busy += s;
    RunMetrics& m = result.metrics;
    m.chunks = static_cast<int>(result.latents.size());
    m.chunk_wall_seconds = instr.chunk_wall_seconds;
    m.max_position_index = instr.max_position_index;
    m.forward_count = instr.forward_count;
    if (cfg.simulated_clock) {
        RunMetrics sim = simulate_pipeline(cfg.sim, m.chunks, cfg.chunk_seconds);
        m.denoise = sim.denoise;
        m.decode = sim.decode;
        m.latency_seconds = sim.latency_seconds;
    } else {
        const double duration = m.chunks * cfg.chunk_seconds;
        m.denoise.busy_seconds = denoise_busy;
        m.denoise.ffd_seconds = denoise_first_done;
        m.denoise.rtf = denoise_busy / duration;
        m.decode.busy_seconds = decode_busy;
        m.decode.ffd_seconds = decode_first_done;
        m.decode.rtf = decode_busy / duration;
        m.latency_seconds = decode_first_done + cfg.chunk_seconds;
    }
    return result;
}

double DriftReport::mean() const {
    if (values.empty()) return 0.0;
    double acc = 0.0;
    for (double v : values) acc += v;
    return acc / static_cast<double>(values.size());
}

std::string DriftReport::csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "chunk,drift\n";
    for (size_t i = 0; i < values.size(); ++i) os << i << ',' << values[i] << '\n';
    return os.str();
}

namespace {

// Per-column mean and variance over the rows of a matrix.
void column_stats(const Tensor& t, std::vector<double>& mu, std::vector<double>& var) {
    const int rows = t.rows(), cols = t.cols();
    mu.assign(cols, 0.0);
    var.assign(cols, 0.0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) mu[c] += t.at(static_cast<int64_t>(r) * cols + c);
    }
    for (double& m : mu) m /= rows;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const double d = t.at(static_cast<int64_t>(r) * cols + c) - mu[c];
            var[c] += d * d;
        }
    }
    for (double& v : var) v /= rows;
}

}  // namespace

DriftReport drift_report(const std::vector<Tensor>& chunks, const Tensor& reference_latent) {
    if (chunks.size() < 2) throw ValidationError("drift_report: need at least two chunks");
    std::vector<double> mu_ref, var_ref, mu, var;
    column_stats(reference_latent, mu_ref, var_ref);
    DriftReport report;
    for (const Tensor& chunk : chunks) {
        if (chunk.cols() != reference_latent.cols()) {
            throw ShapeError("drift_report: latent dim mismatch");
        }
        column_stats(chunk, mu, var);
        double acc = 0.0;
        for (size_t c = 0; c < mu.size(); ++c) {
            acc += (mu[c] - mu_ref[c]) * (mu[c] - mu_ref[c]) +
                   (var[c] - var_ref[c]) * (var[c] - var_ref[c]);
        }
        report.values.push_back(acc / static_cast<double>(mu.size()));
    }
    return report;
}

}  // namespace sdit
