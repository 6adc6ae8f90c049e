#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include <gtest/gtest.h>
#include <opencv2/core.hpp>

#include "synthcount/errors.hpp"
#include "synthcount/random.hpp"

namespace synthcount::testing {

// Fails unless fn throws synthcount::Error with the given code.
inline void expect_error(ErrorCode code, const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), code) << e.what();
        return;
    }
    ADD_FAILURE() << "expected " << to_string(code) << ", nothing was thrown";
}

inline bool same_pixels(const cv::Mat& a, const cv::Mat& b) {
    if (a.size() != b.size() || a.type() != b.type()) return false;
    return cv::norm(a, b, cv::NORM_INF) == 0.0;
}

// Uniform noise image, the hand-rolled generator behind the image properties.
inline cv::Mat random_image(Rng& rng, int height, int width) {
    cv::Mat image(height, width, CV_8UC3);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            auto& px = image.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) px[c] = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
        }
    }
    return image;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        Rng rng(reinterpret_cast<std::uintptr_t>(this) ^ static_cast<std::uint64_t>(::testing::UnitTest::GetInstance()->random_seed()));
        path_ = std::filesystem::temp_directory_path() / ("synthcount_" + tag + "_" + std::to_string(rng.next() % 1000000007ULL));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace synthcount::testing
