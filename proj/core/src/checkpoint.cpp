#include "qsv/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "qsv/error.hpp"

namespace qsv {

namespace {

constexpr char kMagic[4] = {'Q', 'S', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v),
                          static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        raise_format("checkpoint '", path, "': truncated at byte ",
                     static_cast<long long>(is.tellg()));
    }
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) |
           (static_cast<uint32_t>(b[3]) << 24);
}

void write_f64_le(std::ostream& os, const double* src, size_t n) {
    // Little-endian host assumed; static_assert guards the build.
    static_assert(std::endian::native == std::endian::little,
                  "QSCK writer assumes a little-endian host");
    os.write(reinterpret_cast<const char*>(src),
             static_cast<std::streamsize>(n * sizeof(double)));
}

}  // namespace

ad::Value ParamStore::create(const std::string& name, Tensor init) {
    if (params_.count(name)) {
        raise_state("param store: duplicate parameter '", name, "'");
    }
    ad::Value v = ad::Value::param(std::move(init), name);
    params_.emplace(name, v);
    return v;
}

ad::Value ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        raise_state("param store: unknown parameter '", name, "'");
    }
    return it->second;
}

bool ParamStore::contains(const std::string& name) const {
    return params_.count(name) != 0;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
}

size_t ParamStore::total_elements() const {
    size_t n = 0;
    for (const auto& [_, v] : params_) n += v.data().numel();
    return n;
}

std::vector<ad::Value> ParamStore::with_prefix(const std::string& prefix) const {
    std::vector<ad::Value> out;
    for (const auto& [name, v] : params_) {
        if (name.rfind(prefix, 0) == 0) out.push_back(v);
    }
    return out;
}

void save_checkpoint(const std::string& path, const ParamStore& store) {
    std::ofstream os(path, std::ios::binary);
    if (!os) raise_io("checkpoint: cannot open '", path, "' for writing");
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<uint32_t>(store.entries().size()));
    for (const auto& [name, v] : store.entries()) {
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        const Tensor& t = v.data();
        os.put(static_cast<char>(t.rank()));
        for (size_t d : t.shape()) write_u32(os, static_cast<uint32_t>(d));
        write_f64_le(os, t.data(), t.numel());
    }
    if (!os) raise_io("checkpoint: write failed for '", path, "'");
}

std::map<std::string, Tensor> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) raise_io("checkpoint: cannot open '", path, "'");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        raise_format("checkpoint '", path, "': bad magic at byte 0");
    }
    const uint32_t version = read_u32(is, path);
    if (version != kVersion) {
        raise_format("checkpoint '", path, "': unsupported version ", version);
    }
    const uint32_t count = read_u32(is, path);
    std::map<std::string, Tensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_u32(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) {
            raise_format("checkpoint '", path, "': truncated name at byte ",
                         static_cast<long long>(is.tellg()));
        }
        const int rank = is.get();
        if (rank < 0) {
            raise_format("checkpoint '", path, "': truncated rank for '", name, "'");
        }
        Shape shape(static_cast<size_t>(rank));
        for (auto& d : shape) d = read_u32(is, path);
        Tensor t(shape);
        const auto payload_at = is.tellg();
        if (!is.read(reinterpret_cast<char*>(t.data()),
                     static_cast<std::streamsize>(t.numel() * sizeof(double)))) {
            raise_format("checkpoint '", path, "': truncated payload for '", name,
                         "' at byte ", static_cast<long long>(payload_at));
        }
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

void load_checkpoint(const std::string& path, ParamStore& store) {
    auto arrays = read_checkpoint(path);
    for (auto& [name, t] : arrays) {
        if (!store.contains(name)) {
            raise_format("checkpoint '", path, "': unknown parameter '", name, "'");
        }
        ad::Value v = store.get(name);
        if (v.shape() != t.shape()) {
            raise_format("checkpoint '", path, "': parameter '", name, "' has shape ",
                         shape_str(t.shape()), ", expected ", shape_str(v.shape()));
        }
        v.mutable_data() = std::move(t);
    }
}

}  // namespace qsv
