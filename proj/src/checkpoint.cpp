#include "sdit/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace sdit {

namespace {
constexpr char kMagic[5] = {'S', 'A', 'V', 'C', '1'};

template <typename T>
void write_pod(std::ofstream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw IoError(std::string("checkpoint truncated while reading ") + what);
    return value;
}
}  // namespace

uint64_t fnv1a64(const std::string& text) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t Checkpoint::digest() const { return fnv1a64(config_text); }

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_pod<uint32_t>(out, ckpt.version);
    write_pod<uint64_t>(out, ckpt.digest());
    write_pod<uint32_t>(out, static_cast<uint32_t>(ckpt.config_text.size()));
    out.write(ckpt.config_text.data(), static_cast<std::streamsize>(ckpt.config_text.size()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(ckpt.tensors.size()));
    uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<uint32_t>(out, static_cast<uint32_t>(t.shape().size()));
        for (int d : t.shape()) write_pod<uint32_t>(out, static_cast<uint32_t>(d));
        write_pod<uint8_t>(out, 0);  // f64
        write_pod<uint64_t>(out, offset);
        offset += t.data().size() * sizeof(double);
    }
    write_pod<uint64_t>(out, offset);
    for (const auto& [name, t] : ckpt.tensors) {
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    }
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[5];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError("bad checkpoint magic: " + path);
    }
    Checkpoint ckpt;
    ckpt.version = read_pod<uint32_t>(in, "version");
    if (ckpt.version != 1) throw IoError("unsupported checkpoint version");
    const uint64_t stored_digest = read_pod<uint64_t>(in, "digest");
    const auto cfg_len = read_pod<uint32_t>(in, "config length");
    ckpt.config_text.resize(cfg_len);
    in.read(ckpt.config_text.data(), cfg_len);
    if (!in) throw IoError("checkpoint truncated while reading config");
    if (stored_digest != ckpt.digest()) throw IoError("checkpoint config digest mismatch");
    const auto n = read_pod<uint32_t>(in, "tensor count");
    struct Entry {
        std::string name;
        Shape shape;
        uint64_t offset;
    };
    std::vector<Entry> table(n);
    for (auto& e : table) {
        const auto name_len = read_pod<uint32_t>(in, "name length");
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        if (!in) throw IoError("checkpoint truncated while reading name");
        const auto ndims = read_pod<uint32_t>(in, "rank");
        e.shape.resize(ndims);
        for (auto& d : e.shape) d = static_cast<int>(read_pod<uint32_t>(in, "dim"));
        const auto dtype = read_pod<uint8_t>(in, "dtype");
        if (dtype != 0) throw IoError("unsupported tensor dtype in checkpoint");
        e.offset = read_pod<uint64_t>(in, "offset");
    }
    const auto data_bytes = read_pod<uint64_t>(in, "data size");
    std::vector<char> raw(data_bytes);
    in.read(raw.data(), static_cast<std::streamsize>(data_bytes));
    if (!in) throw IoError("checkpoint truncated while reading data");
    for (const auto& e : table) {
        const int64_t count = shape_numel(e.shape);
        if (e.offset + count * sizeof(double) > data_bytes) {
            throw IoError("checkpoint tensor extends past data section");
        }
        std::vector<double> values(static_cast<size_t>(count));
        std::memcpy(values.data(), raw.data() + e.offset, values.size() * sizeof(double));
        ckpt.tensors.emplace_back(e.name, Tensor::from(e.shape, std::move(values)));
    }
    return ckpt;
}

Checkpoint load_checkpoint(const std::string& path, const std::string& expected_config) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.config_text != expected_config) {
        throw ValidationError("checkpoint config incompatible with requested model config");
    }
    return ckpt;
}

}  // namespace sdit
