#ifndef NEXTGUARD_TESTS_SUPPORT_HPP
#define NEXTGUARD_TESTS_SUPPORT_HPP

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <gtest/gtest.h>

#include <nextguard/sae.hpp>

namespace nextguard::testing {

inline SaeParams identity_sae(std::size_t d, Sparsity sp = Sparsity::relu())
{
    SaeParts p;
    p.d = d;
    p.M = d;
    p.sparsity = sp;
    p.enc_weights.assign(d * d, 0.0f);
    p.dec_weights.assign(d * d, 0.0f);
    for (std::size_t i = 0; i < d; ++i) {
        p.enc_weights[i * d + i] = 1.0f;
        p.dec_weights[i * d + i] = 1.0f;
    }
    p.enc_bias.assign(d, 0.0f);
    p.pre_bias.assign(d, 0.0f);
    return SaeParams::create(std::move(p));
}

inline std::vector<float> basis(std::size_t d, std::vector<std::pair<std::size_t, float>> entries)
{
    std::vector<float> h(d, 0.0f);
    for (auto [i, v] : entries) {
        h[i] = v;
    }
    return h;
}

inline std::filesystem::path golden_path(const std::string &name)
{
    return std::filesystem::path(NEXTGUARD_GOLDEN_DIR) / name;
}

/// Compares `actual` with the named golden file. With NEXTGUARD_UPDATE_GOLDEN=1
/// the file is rewritten instead.
inline void expect_golden(const std::string &name, const std::string &actual)
{
    const auto path = golden_path(name);
    if (const char *u = std::getenv("NEXTGUARD_UPDATE_GOLDEN"); u && std::string(u) == "1") {
        std::ofstream(path, std::ios::binary) << actual;
        return;
    }
    std::ifstream in(path, std::ios::binary);
    ASSERT_TRUE(in) << "missing golden file " << path << " (regenerate with NEXTGUARD_UPDATE_GOLDEN=1)";
    std::ostringstream ss;
    ss << in.rdbuf();
    EXPECT_EQ(ss.str(), actual) << "golden mismatch: " << path;
}

} // namespace nextguard::testing

#endif
