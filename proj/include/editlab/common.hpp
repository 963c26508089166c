#pragma once
// Shared numeric types, deterministic RNG, hashing and small utilities.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace editlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Library errors carry a human-readable message; contracts that the spec
// phrases as "error ..." throw this type.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

template <class... Args>
[[noreturn]] inline void fail(Args&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    throw Error(os.str());
}

inline void require(bool cond, const std::string& what) {
    if (!cond) {
        throw Error(what);
    }
}

// splitmix64; used both as the stream generator and to derive sub-seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic RNG with a fully specified algorithm. std::normal_distribution
// et al. are implementation-defined, which would break the bit-determinism
// contracts, so uniforms come from splitmix64 and normals from Box-Muller.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        require(n > 0, "Rng::below: n must be positive");
        // Rejection sampling keeps the draw unbiased and deterministic.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return v % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // Derive an independent child seed; `tag` separates streams with the
    // same parent seed.
    std::uint64_t fork(std::uint64_t tag) {
        std::uint64_t s = state_ ^ (0xd1342543de82ef95ull * (tag + 1));
        return splitmix64(s);
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    std::uint64_t s = base ^ (0x9e3779b97f4a7c15ull * (tag + 1));
    return splitmix64(s);
}

// FNV-1a 64-bit, hex-encoded; used for artifact checksums in manifests.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

inline std::string checksum_bytes(std::string_view bytes) {
    return to_hex(fnv1a(bytes.data(), bytes.size()));
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail("cannot open file: ", path.string());
    }
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail("cannot write file: ", path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        fail("short write: ", path.string());
    }
}

inline std::string checksum_file(const std::filesystem::path& path) {
    return checksum_bytes(read_file_bytes(path));
}

// Numerically stable softmax over a column vector of logits.
inline Vector softmax(const Vector& logits) {
    const double m = logits.maxCoeff();
    Vector e = (logits.array() - m).exp();
    return e / e.sum();
}

// log(softmax(logits))
inline Vector log_softmax(const Vector& logits) {
    const double m = logits.maxCoeff();
    const double lse = std::log((logits.array() - m).exp().sum()) + m;
    return logits.array() - lse;
}

// argmax with lowest-index tie-break; deterministic by construction.
inline int argmax_lowest(const Vector& v) {
    int best = 0;
    for (int i = 1; i < v.size(); ++i) {
        if (v(i) > v(best)) {
            best = i;
        }
    }
    return best;
}

}  // namespace editlab
