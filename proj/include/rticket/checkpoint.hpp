#pragma once

// Versioned binary checkpoint.
//
//   magic      "RTCKPT\0\0"          8 bytes
//   version    u32                  (currently 1)
//   config     7 x i32              vocab, embed, layers, heads, mlp, max_seq_len, classes
//   sections   u32 count, then per section:
//                name_len u32, name bytes, tensor_count u32, then per tensor:
//                  name_len u32, name bytes, rank u32, dims u64[rank],
//                  payload float32[prod(dims)]
//
// Sections: "theta" (always), "theta0" (after pretraining), "gates" (log_alpha
// and beta tensors, after mask learning). All integers and floats are
// little-endian. Values are stored as 32-bit floats, so a save/load cycle maps
// every parameter to its nearest float32; a second cycle is the identity.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "rticket/model.hpp"

namespace rticket {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const MaskedModel& model, const std::filesystem::path& path);
MaskedModel load_checkpoint(const std::filesystem::path& path);

void write_checkpoint(const MaskedModel& model, std::ostream& out);
MaskedModel read_checkpoint(std::istream& in);

/// Round every parameter (theta, theta0, gates) to float32, matching what a checkpoint holds.
void round_to_storage(MaskedModel& model);

namespace io {
// Little-endian primitives shared with the ticket format.
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_i32(std::ostream& out, std::int32_t v);
void write_f32(std::ostream& out, float v);
void write_string(std::ostream& out, const std::string& s);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
std::int32_t read_i32(std::istream& in);
float read_f32(std::istream& in);
std::string read_string(std::istream& in, std::uint32_t max_len = 1u << 16);
}  // namespace io

}  // namespace rticket
