#ifndef METACRITIC_CHECKPOINT_HPP
#define METACRITIC_CHECKPOINT_HPP

// Binary parameter checkpoints. Fixed little-endian layout, independent of
// host endianness:
//
//   offset  size  field
//   0       8     magic "MCCKPT01"
//   8       1     kind: 0 critic, 1 policy, 2 qfunction
//   9       1     activation: 0 tanh, 1 elu, 2 relu
//   10      1     input mode: 0 concat, 1 relative-goal
//   11      1     reserved (0)
//   12      4     state_dim   (u32)
//   16      4     action_dim  (u32)
//   20      4     goal_dim    (u32)
//   24      4     hidden-layer count H (u32)
//   28      4*H   hidden widths (u32 each)
//   28+4H   8     init seed (u64)
//   36+4H   8     parameter count N (u64)
//   44+4H   8*N   parameters (fp64, IEEE-754 bit pattern)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metacritic/nets.hpp"

namespace metacritic {

enum class CheckpointKind : std::uint8_t { Critic = 0, Policy = 1, QFunction = 2 };

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::Critic;
  Activation activation = Activation::Elu;
  std::uint8_t input_mode = 0;  // 0 concat, 1 relative-goal
  std::uint32_t state_dim = 0;
  std::uint32_t action_dim = 0;
  std::uint32_t goal_dim = 0;
  std::vector<std::uint32_t> hidden;
  std::uint64_t seed = 0;
  std::vector<double> params;
};

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 8);
}

inline void get_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw CheckpointError("checkpoint: truncated file");
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  get_bytes(is, b, 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  unsigned char b[8];
  get_bytes(is, b, 8);
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline constexpr char kMagic[8] = {'M', 'C', 'C', 'K', 'P', 'T', '0', '1'};

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const Checkpoint& ck) {
  detail::put_bytes(os, detail::kMagic, 8);
  unsigned char flags[4] = {static_cast<unsigned char>(ck.kind),
                            static_cast<unsigned char>(ck.activation), ck.input_mode, 0};
  detail::put_bytes(os, flags, 4);
  detail::put_u32(os, ck.state_dim);
  detail::put_u32(os, ck.action_dim);
  detail::put_u32(os, ck.goal_dim);
  detail::put_u32(os, static_cast<std::uint32_t>(ck.hidden.size()));
  for (std::uint32_t w : ck.hidden) detail::put_u32(os, w);
  detail::put_u64(os, ck.seed);
  detail::put_u64(os, ck.params.size());
  for (double v : ck.params) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw CheckpointError("checkpoint: write failed");
}

inline Checkpoint load_checkpoint(std::istream& is) {
  char magic[8];
  detail::get_bytes(is, magic, 8);
  if (std::memcmp(magic, detail::kMagic, 8) != 0)
    throw CheckpointError("checkpoint: bad magic");
  unsigned char flags[4];
  detail::get_bytes(is, flags, 4);
  if (flags[0] > 2) throw CheckpointError("checkpoint: unknown kind");
  if (flags[1] > 2) throw CheckpointError("checkpoint: unknown activation");
  if (flags[2] > 1) throw CheckpointError("checkpoint: unknown input mode");
  Checkpoint ck;
  ck.kind = static_cast<CheckpointKind>(flags[0]);
  ck.activation = static_cast<Activation>(flags[1]);
  ck.input_mode = flags[2];
  ck.state_dim = detail::get_u32(is);
  ck.action_dim = detail::get_u32(is);
  ck.goal_dim = detail::get_u32(is);
  std::uint32_t nh = detail::get_u32(is);
  if (nh > 64) throw CheckpointError("checkpoint: implausible hidden-layer count");
  ck.hidden.resize(nh);
  for (std::uint32_t& w : ck.hidden) w = detail::get_u32(is);
  ck.seed = detail::get_u64(is);
  std::uint64_t n = detail::get_u64(is);
  if (n > (1ull << 32)) throw CheckpointError("checkpoint: implausible parameter count");
  ck.params.resize(n);
  for (double& v : ck.params) v = std::bit_cast<double>(detail::get_u64(is));
  return ck;
}

inline void save_checkpoint_file(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot open for write: " + path);
  save_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open: " + path);
  return load_checkpoint(is);
}

}  // namespace metacritic

#endif  // METACRITIC_CHECKPOINT_HPP
