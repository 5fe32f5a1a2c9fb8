#include "chatnmt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "chatnmt/error.hpp"

namespace chatnmt {

namespace {

constexpr char kMagic[8] = {'C', 'N', 'M', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF64 = 0;

void put_u32(std::ostream& os, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<uint64_t>(d)); }

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw LoadError("checkpoint truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw LoadError("checkpoint truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace

const TensorEntry* CheckpointImage::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void save_checkpoint(const std::string& path, const std::string& meta_json,
                     const ParamList& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw LoadError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 8);
    put_u32(os, kVersion);
    put_u64(os, meta_json.size());
    os.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
    put_u64(os, params.size());
    for (const auto& p : params) {
        put_u32(os, static_cast<uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        os.put(static_cast<char>(kDtypeF64));
        put_u32(os, static_cast<uint32_t>(p.tensor.rank()));
        for (int d : p.tensor.shape()) put_u32(os, static_cast<uint32_t>(d));
        for (double v : p.tensor.data()) put_f64(os, v);
    }
    os.flush();
    if (!os) throw LoadError("write failed for checkpoint: " + path);
}

CheckpointImage load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot open checkpoint: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw LoadError("not a checkpoint file: " + path);
    const uint32_t version = get_u32(is);
    if (version != kVersion)
        throw LoadError("unsupported checkpoint version " + std::to_string(version));
    CheckpointImage img;
    const uint64_t meta_len = get_u64(is);
    img.meta_json.resize(meta_len);
    if (meta_len && !is.read(img.meta_json.data(), static_cast<std::streamsize>(meta_len)))
        throw LoadError("checkpoint truncated in metadata");
    const uint64_t count = get_u64(is);
    img.tensors.reserve(count);
    for (uint64_t t = 0; t < count; ++t) {
        TensorEntry e;
        const uint32_t name_len = get_u32(is);
        e.name.resize(name_len);
        if (!is.read(e.name.data(), name_len)) throw LoadError("checkpoint truncated in name");
        const int dtype = is.get();
        if (dtype != kDtypeF64)
            throw LoadError("unsupported dtype " + std::to_string(dtype) + " for " + e.name);
        const uint32_t rank = get_u32(is);
        size_t n = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            const uint32_t d = get_u32(is);
            if (d == 0) throw LoadError("zero extent in " + e.name);
            e.shape.push_back(static_cast<int>(d));
            n *= d;
        }
        e.data.resize(n);
        for (size_t i = 0; i < n; ++i) e.data[i] = get_f64(is);
        img.tensors.push_back(std::move(e));
    }
    return img;
}

void restore_params(ParamList& params, const CheckpointImage& image, bool allow_missing_in_file) {
    std::string problems;
    auto note = [&problems](const std::string& s) {
        if (!problems.empty()) problems += "; ";
        problems += s;
    };
    for (auto& p : params) {
        const TensorEntry* e = image.find(p.name);
        if (!e) {
            if (!allow_missing_in_file) note("missing from file: " + p.name);
            continue;
        }
        if (e->shape != p.tensor.shape()) {
            note("shape mismatch for " + p.name + ": file " + shape_string(e->shape) +
                 " vs model " + shape_string(p.tensor.shape()));
            continue;
        }
        std::copy(e->data.begin(), e->data.end(), p.tensor.mutable_data().begin());
    }
    for (const auto& e : image.tensors) {
        bool known = false;
        for (const auto& p : params) known |= (p.name == e.name);
        if (!known) note("unknown parameter in file: " + e.name);
    }
    if (!problems.empty()) throw LoadError("checkpoint incompatible: " + problems);
}

}  // namespace chatnmt
