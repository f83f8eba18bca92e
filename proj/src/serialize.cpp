#include "emodiff/serialize.hpp"

#include <cstring>
#include <fstream>

#include "emodiff/errors.hpp"

namespace emodiff {

namespace {

void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw IoError("serialize: write failed");
}

void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (is.gcount() != static_cast<std::streamsize>(n)) throw IoError("serialize: unexpected end of file");
}

}  // namespace

void write_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    write_bytes(os, b, 2);
}

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    write_bytes(os, b, 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    write_bytes(os, b, 8);
}

void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

std::uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    read_bytes(is, b, 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    read_bytes(is, b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    read_bytes(is, b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

float read_f32(std::istream& is) {
    const std::uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

void write_tensor(std::ostream& os, const Tensor& t) {
    const auto& shape = t.shape();
    if (shape.size() > 255) throw ArgumentError("write_tensor: rank too large");
    unsigned char rank = static_cast<unsigned char>(shape.size());
    write_bytes(os, &rank, 1);
    for (std::size_t d : shape) write_u64(os, d);
    for (double v : t.data()) write_f32(os, static_cast<float>(v));
}

Tensor read_tensor(std::istream& is) {
    unsigned char rank;
    read_bytes(is, &rank, 1);
    Shape shape(rank);
    for (auto& d : shape) d = read_u64(is);
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = static_cast<double>(read_f32(is));
    return Tensor(std::move(shape), std::move(data));
}

void write_magic(std::ostream& os, const char magic[4]) { write_bytes(os, magic, 4); }

void expect_magic(std::istream& is, const char magic[4], const std::string& context) {
    char got[4];
    read_bytes(is, got, 4);
    if (std::memcmp(got, magic, 4) != 0) {
        throw DataError(context + ": bad magic, expected '" + std::string(magic, 4) + "' got '" +
                        std::string(got, 4) + "'");
    }
}

void write_param_block(std::ostream& os, const std::vector<const Parameter*>& params) {
    write_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const Parameter* p : params) {
        if (p->name.size() > 65535) throw ArgumentError("write_param_block: name too long");
        write_u16(os, static_cast<std::uint16_t>(p->name.size()));
        write_bytes(os, p->name.data(), p->name.size());
        write_tensor(os, p->value);
    }
}

void read_param_block(std::istream& is, ParameterSet& into) {
    const std::uint32_t count = read_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t len = read_u16(is);
        std::string name(len, '\0');
        read_bytes(is, name.data(), len);
        Tensor value = read_tensor(is);
        if (!into.contains(name)) {
            throw DataError("read_param_block: unknown parameter '" + name + "'");
        }
        Parameter& p = into.get(name);
        if (p.value.shape() != value.shape()) {
            throw DataError("read_param_block: shape mismatch for '" + name + "'");
        }
        p.value.mutable_data() = value.data();
    }
}

void save_dceb(const std::string& path, const ParameterSet& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_dceb: cannot open " + path);
    write_magic(os, "DCEB");
    write_u32(os, kCheckpointVersion);
    write_param_block(os, params.all());
}

void load_dceb(const std::string& path, ParameterSet& into) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_dceb: cannot open " + path);
    expect_magic(is, "DCEB", path);
    const std::uint32_t version = read_u32(is);
    if (version != kCheckpointVersion) {
        throw DataError("load_dceb: unsupported version " + std::to_string(version));
    }
    read_param_block(is, into);
}

}  // namespace emodiff
