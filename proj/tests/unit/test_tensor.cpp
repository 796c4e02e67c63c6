#include "builders.hpp"
#include "error.hpp"
#include "tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>

using namespace snnconv;
using snnconv::test::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream(p, std::ios::binary) << bytes;
}

ErrorCode code_of(const std::filesystem::path& p) {
    try {
        load_tensor(p);
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::Internal;
}

} // namespace

TEST_CASE("tensor file round trip is bit exact") {
    TempDir dir("tensor");
    Tensor t({2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i) * 0.1f - 1.f;
    save_tensor(t, dir / "t.tensor");
    CHECK(load_tensor(dir / "t.tensor").bitwise_equal(t));

    Tensor empty({0, 4});
    save_tensor(empty, dir / "e.tensor");
    CHECK(load_tensor(dir / "e.tensor").shape() == Shape{0, 4});
}

TEST_CASE("malformed tensor files are rejected") {
    TempDir dir("tensor-bad");
    save_tensor(Tensor({2, 2}, 1.f), dir / "ok.tensor");
    const std::string good = slurp(dir / "ok.tensor");

    std::string magic = good;
    magic[0] = 'X';
    spit(dir / "magic.tensor", magic);
    CHECK(code_of(dir / "magic.tensor") == ErrorCode::Format);

    spit(dir / "short.tensor", good.substr(0, good.size() - 3));
    CHECK(code_of(dir / "short.tensor") == ErrorCode::Format);

    spit(dir / "long.tensor", good + "abcd");
    CHECK(code_of(dir / "long.tensor") == ErrorCode::Format);

    Tensor nan({1}, std::numeric_limits<float>::quiet_NaN());
    save_tensor(nan, dir / "nan.tensor");
    CHECK(code_of(dir / "nan.tensor") == ErrorCode::Numeric);

    CHECK(code_of(dir / "missing.tensor") == ErrorCode::Io);
}

TEST_CASE("sample, samples and stack are inverse") {
    Tensor a({2, 2}, 1.f), b({2, 2}, 2.f);
    const Tensor items[] = {a, b};
    Tensor s = stack(items);
    CHECK(s.shape() == Shape{2, 2, 2});
    CHECK(s.sample(1).bitwise_equal(b));
    CHECK(s.samples(1, 1).shape() == Shape{1, 2, 2});
}

TEST_CASE("relative deviation is scaled by the reference range") {
    Tensor ref({2}, std::vector<float>{0.f, 4.f});
    Tensor act({2}, std::vector<float>{0.f, 5.f});
    CHECK(relative_deviation(act, ref) == doctest::Approx(0.25));
    CHECK(relative_deviation(Tensor({2}), Tensor({2})) == 0.0);
    CHECK(max_abs_difference(act, ref) == doctest::Approx(1.0));
}
