#include <editlab/common.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

using namespace editlab;

TEST_CASE("splitmix64 reference sequence", "[common]") {
    // Published test vectors for splitmix64 with seed 1234567.
    std::uint64_t state = 1234567;
    CHECK(splitmix64(state) == 0x599ed017fb08fc85ull);
    state = 0;
    CHECK(splitmix64(state) == 0xe220a8397b1dcdafull);
    CHECK(splitmix64(state) == 0x6e789e6aa1b965f4ull);
    CHECK(splitmix64(state) == 0x06c45d188009454full);
}

TEST_CASE("rng determinism and ranges", "[common]") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const double u = a.uniform();
        CHECK(u == b.uniform());
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    CHECK(a.next_u64() != c.next_u64());

    Rng d(7);
    for (int i = 0; i < 200; ++i) {
        CHECK(d.below(13) < 13);
    }
    CHECK_THROWS_AS(d.below(0), Error);
}

TEST_CASE("rng normal moments", "[common]") {
    Rng rng(3);
    const int n = 20000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
    Rng shifted(3);
    Rng other(3);
    CHECK(shifted.normal(2.0, 0.5) == Catch::Approx(2.0 + 0.5 * other.normal()).epsilon(1e-15));
}

TEST_CASE("shuffle is a seeded permutation", "[common]") {
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7}, w{0, 1, 2, 3, 4, 5, 6, 7};
    Rng a(9), b(9);
    a.shuffle(v);
    b.shuffle(w);
    CHECK(v == w);
    CHECK(std::set<int>(v.begin(), v.end()).size() == 8);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("derive_seed separates streams", "[common]") {
    CHECK(derive_seed(1, 0) != derive_seed(1, 1));
    CHECK(derive_seed(1, 0) != derive_seed(2, 0));
    CHECK(derive_seed(1, 5) == derive_seed(1, 5));
}

TEST_CASE("fnv1a reference vectors", "[common]") {
    // Published FNV-1a 64-bit vectors.
    CHECK(fnv1a("", 0) == 0xcbf29ce484222325ull);
    CHECK(fnv1a("a", 1) == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a("foobar", 6) == 0x85944171f73967e8ull);
    CHECK(checksum_bytes("") == "cbf29ce484222325");
    CHECK(to_hex(0xdeadbeefull) == "00000000deadbeef");
}

TEST_CASE("file round trip and checksum", "[common]") {
    const auto path = std::filesystem::temp_directory_path() / "editlab_common_rt.bin";
    const std::string payload("\x00\x01\xffpayload\n", 10);
    write_file_bytes(path, payload);
    CHECK(read_file_bytes(path) == payload);
    CHECK(checksum_file(path) == checksum_bytes(payload));
    std::filesystem::remove(path);
    CHECK_THROWS_AS(read_file_bytes(path), Error);
}

TEST_CASE("softmax properties and oracle", "[common]") {
    Vector v(3);
    v << 0.3, -1.2, 2.0;
    const Vector p = softmax(v);
    // Independent direct evaluation (no max-shift; logits are small).
    double sum = 0.0;
    for (int i = 0; i < 3; ++i) {
        sum += std::exp(v(i));
    }
    for (int i = 0; i < 3; ++i) {
        CHECK(p(i) == Catch::Approx(std::exp(v(i)) / sum).epsilon(1e-12));
        CHECK(log_softmax(v)(i) == Catch::Approx(std::log(p(i))).epsilon(1e-12));
    }
    CHECK(p.sum() == Catch::Approx(1.0).epsilon(1e-12));
    // Shift invariance is what the max-subtraction must preserve.
    const Vector q = softmax((v.array() + 300.0).matrix());
    for (int i = 0; i < 3; ++i) {
        CHECK(q(i) == Catch::Approx(p(i)).epsilon(1e-12));
    }
}

TEST_CASE("argmax breaks ties at the lowest index", "[common]") {
    Vector v(4);
    v << 1.0, 3.0, 3.0, 2.0;
    CHECK(argmax_lowest(v) == 1);
    Vector w(3);
    w << 5.0, 5.0, 5.0;
    CHECK(argmax_lowest(w) == 0);
}

TEST_CASE("require and fail raise library errors", "[common]") {
    CHECK_THROWS_AS(require(false, "nope"), Error);
    CHECK_NOTHROW(require(true, "fine"));
    try {
        fail("a=", 1, " b=", 2.5);
        FAIL("unreachable");
    } catch (const Error& e) {
        CHECK(std::string(e.what()) == "a=1 b=2.5");
    }
}
