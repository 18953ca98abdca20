#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include <json.hpp>

#include "mimicparts/nn.hpp"
#include "mimicparts/tensor.hpp"

namespace mimicparts::io {

using json = nlohmann::json;

// Length-framed JSON block used by all container formats:
// u32 little-endian byte count, then the UTF-8 JSON text.
void write_json_block(std::ostream& os, const json& j);
json read_json_block(std::istream& is);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);
void ensure_dir(const std::filesystem::path& dir);

uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64(const std::string& s);
std::string hex64(uint64_t v);
std::string hash_file(const std::filesystem::path& path);
// Hash of the canonical (sorted-key) JSON dump.
std::string hash_json(const json& j);

// Checkpoint container "MPCK": JSON metadata plus named MPT1 tensors,
// including Adam moments so training can resume.
void save_checkpoint(const std::filesystem::path& path, const json& meta,
                     const ParamStore& params);
struct Checkpoint {
  json meta;
  ParamStore params;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mimicparts::io
