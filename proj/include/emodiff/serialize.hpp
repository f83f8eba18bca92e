#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "emodiff/parameter.hpp"
#include "emodiff/tensor.hpp"

namespace emodiff {

// Little-endian binary primitives shared by the checkpoint and corpus
// formats. Tensor payloads are rank u8, dims u64 each, then f32 data
// (files are single precision; in-memory math stays double).
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, float v);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void write_magic(std::ostream& os, const char magic[4]);
void expect_magic(std::istream& is, const char magic[4], const std::string& context);

// Named parameter block: count u32, then per parameter name-length u16,
// UTF-8 name, tensor payload.
void write_param_block(std::ostream& os, const std::vector<const Parameter*>& params);
// Loads values into an existing set; every stored name must exist with a
// matching shape.
void read_param_block(std::istream& is, ParameterSet& into);

// Single-set checkpoint file, magic "DCEB".
void save_dceb(const std::string& path, const ParameterSet& params);
void load_dceb(const std::string& path, ParameterSet& into);

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace emodiff
