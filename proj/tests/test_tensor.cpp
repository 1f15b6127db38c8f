#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "hsalab/checkpoint.hpp"
#include "hsalab/rng.hpp"
#include "hsalab/tensor.hpp"
#include "hsalab/thread_pool.hpp"

using namespace hsalab;

TEST_SUITE("tensor") {
  TEST_CASE("shape and numel agree") {
    Tensor<float> t({2, 3, 4});
    CHECK(t.size() == 24);
    CHECK(t.dim(0) == 2);
    t.at(1, 2, 3) = 5.0f;
    CHECK(t[23] == 5.0f);
    t.reshape({6, 4});
    CHECK(t.at(5, 3) == 5.0f);
    CHECK_THROWS_AS(t.reshape({7, 4}), DimensionError);
  }

  TEST_CASE("finite check catches NaN") {
    Tensor<double> t({4});
    CHECK_NOTHROW(ensure_finite(t, "t"));
    t[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(ensure_finite(t, "t"), ContractError);
  }

  TEST_CASE("rng streams are identical for identical seeds") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(124);
    bool differs = false;
    Rng a2(123);
    for (int i = 0; i < 10; ++i) differs = differs || (a2.next_u64() != c.next_u64());
    CHECK(differs);
  }

  TEST_CASE("rng state round trip") {
    Rng a(99);
    a.normal();
    const auto st = a.state();
    const double next = a.uniform();
    Rng b(1);
    b.set_state(st);
    CHECK(b.uniform() == next);
  }

  TEST_CASE("parallel_for output independent of worker count") {
    std::vector<double> out1(257), out2(257);
    {
      ThreadPool pool(1);
      pool.parallel_for(257, [&](std::size_t i) { out1[i] = std::sin(double(i)) * i; });
    }
    {
      ThreadPool pool(4);
      pool.parallel_for(257, [&](std::size_t i) { out2[i] = std::sin(double(i)) * i; });
    }
    CHECK(std::memcmp(out1.data(), out2.data(), out1.size() * sizeof(double)) == 0);
  }

  TEST_CASE("checkpoint container round trips bit-exactly") {
    Rng rng(5);
    Tensor<float> a({3, 5});
    Tensor<double> b({7});
    Tensor<std::int32_t> c({4});
    for (auto& v : a.flat()) v = static_cast<float>(rng.normal());
    for (auto& v : b.flat()) v = rng.normal();
    for (auto& v : c.flat()) v = static_cast<std::int32_t>(rng.uniform_int(1000));

    const std::string path = "ckpt_roundtrip_test.bin";
    {
      CheckpointWriter w;
      w.add("a", a);
      w.add("b", b);
      w.add("c", c);
      w.add_scalar<std::uint64_t>("step", 42);
      w.write(path);
    }
    {
      CheckpointReader r(path);
      Tensor<float> a2;
      Tensor<double> b2;
      Tensor<std::int32_t> c2;
      r.read("a", a2);
      r.read("b", b2);
      r.read("c", c2);
      CHECK(a2.shape() == a.shape());
      CHECK(std::memcmp(a2.data(), a.data(), a.size() * sizeof(float)) == 0);
      CHECK(std::memcmp(b2.data(), b.data(), b.size() * sizeof(double)) == 0);
      CHECK(std::memcmp(c2.data(), c.data(), c.size() * sizeof(std::int32_t)) == 0);
      CHECK(r.read_scalar<std::uint64_t>("step") == 42);
      CHECK(r.has("a"));
      CHECK(!r.has("zzz"));
      CHECK_THROWS_AS(r.entry("zzz"), ContractError);
    }
    std::filesystem::remove(path);
  }

  TEST_CASE("checkpoint rejects dtype mismatch") {
    Tensor<float> a({2});
    const std::string path = "ckpt_dtype_test.bin";
    CheckpointWriter w;
    w.add("a", a);
    w.write(path);
    CheckpointReader r(path);
    Tensor<double> wrong;
    CHECK_THROWS_AS(r.read("a", wrong), ContractError);
    std::filesystem::remove(path);
  }
}
