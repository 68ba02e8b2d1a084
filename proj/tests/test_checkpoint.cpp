#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "metacritic/checkpoint.hpp"
#include "metacritic/rng.hpp"

using namespace metacritic;

namespace {

Checkpoint sample_ck() {
  Checkpoint ck;
  ck.kind = CheckpointKind::Critic;
  ck.activation = Activation::Elu;
  ck.input_mode = 1;
  ck.state_dim = 4;
  ck.action_dim = 2;
  ck.goal_dim = 2;
  ck.hidden = {32, 16};
  ck.seed = 0xDEADBEEFCAFEF00Dull;
  Rng rng(7);
  for (int i = 0; i < 101; ++i) ck.params.push_back(rng.normal());
  return ck;
}

}  // namespace

TEST_CASE("checkpoint round trip is exact, including special values") {
  Checkpoint ck = sample_ck();
  ck.params[3] = 0.0;
  ck.params[4] = -0.0;
  ck.params[5] = std::numeric_limits<double>::denorm_min();
  ck.params[6] = -std::numeric_limits<double>::max();

  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  save_checkpoint(buf, ck);
  Checkpoint rt = load_checkpoint(buf);

  CHECK(rt.kind == ck.kind);
  CHECK(rt.activation == ck.activation);
  CHECK(rt.input_mode == ck.input_mode);
  CHECK(rt.state_dim == ck.state_dim);
  CHECK(rt.action_dim == ck.action_dim);
  CHECK(rt.goal_dim == ck.goal_dim);
  CHECK(rt.hidden == ck.hidden);
  CHECK(rt.seed == ck.seed);
  REQUIRE(rt.params.size() == ck.params.size());
  for (std::size_t i = 0; i < ck.params.size(); ++i)
    CHECK(std::bit_cast<std::uint64_t>(rt.params[i]) ==
          std::bit_cast<std::uint64_t>(ck.params[i]));
  CHECK(std::signbit(rt.params[4]));
}

TEST_CASE("checkpoint byte layout matches the documented offsets") {
  Checkpoint ck;
  ck.kind = CheckpointKind::QFunction;
  ck.activation = Activation::Tanh;
  ck.input_mode = 0;
  ck.state_dim = 1;
  ck.action_dim = 2;
  ck.goal_dim = 3;
  ck.hidden = {5};
  ck.seed = 0x0102030405060708ull;
  ck.params = {1.0};

  std::ostringstream os(std::ios::binary);
  save_checkpoint(os, ck);
  std::string b = os.str();
  REQUIRE(b.size() == 8 + 4 + 16 + 4 + 8 + 8 + 8);
  CHECK(b.substr(0, 8) == "MCCKPT01");
  CHECK(b[8] == 2);   // kind
  CHECK(b[9] == 0);   // activation
  CHECK(b[10] == 0);  // input mode
  CHECK(b[11] == 0);  // reserved
  CHECK(b[12] == 1);  // state_dim LSB
  CHECK(b[16] == 2);
  CHECK(b[20] == 3);
  CHECK(b[24] == 1);  // one hidden layer
  CHECK(b[28] == 5);  // its width
  CHECK(static_cast<unsigned char>(b[32]) == 0x08);  // seed LSB first
  CHECK(static_cast<unsigned char>(b[39]) == 0x01);
  CHECK(b[40] == 1);  // param count
  // 1.0 = 0x3FF0000000000000, little-endian
  CHECK(static_cast<unsigned char>(b[55]) == 0x3F);
  CHECK(static_cast<unsigned char>(b[54]) == 0xF0);
  CHECK(static_cast<unsigned char>(b[48]) == 0x00);
}

TEST_CASE("checkpoint load rejects corrupt input") {
  Checkpoint ck = sample_ck();
  std::ostringstream os(std::ios::binary);
  save_checkpoint(os, ck);
  std::string good = os.str();

  {
    std::istringstream is(std::string("XXCKPT01") + good.substr(8), std::ios::binary);
    CHECK_THROWS_WITH_AS(load_checkpoint(is), "checkpoint: bad magic", CheckpointError);
  }
  {
    std::string bad = good;
    bad[8] = 9;
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_WITH_AS(load_checkpoint(is), "checkpoint: unknown kind", CheckpointError);
  }
  {
    std::istringstream is(good.substr(0, good.size() - 5), std::ios::binary);
    CHECK_THROWS_WITH_AS(load_checkpoint(is), "checkpoint: truncated file", CheckpointError);
  }
  {
    std::istringstream is(good.substr(0, 20), std::ios::binary);
    CHECK_THROWS_AS(load_checkpoint(is), CheckpointError);
  }
}

TEST_CASE("checkpoint file helpers") {
  Checkpoint ck = sample_ck();
  std::string path = "/tmp/mc_ckpt_test.bin";
  save_checkpoint_file(path, ck);
  Checkpoint rt = load_checkpoint_file(path);
  CHECK(rt.params == ck.params);
  CHECK(rt.hidden == ck.hidden);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint_file("/tmp/does_not_exist_mc.bin"), CheckpointError);
}
