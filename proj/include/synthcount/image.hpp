#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

namespace synthcount {

// Images are 8-bit, 3-channel cv::Mat (BGR, OpenCV's native order).
// Binary masks are CV_8UC1 with values {0, 1}.

struct Box {
    int x = 0;
    int y = 0;
    int width = 0;
    int height = 0;

    int area() const { return width * height; }
    bool operator==(const Box&) const = default;
};

// Area averaging when shrinking, bilinear when enlarging.
cv::Mat resize_image(const cv::Mat& image, int height, int width);

cv::Mat crop(const cv::Mat& image, const Box& box);

void write_png(const std::filesystem::path& path, const cv::Mat& image);
cv::Mat read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const cv::Mat& image);
cv::Mat decode_image(std::span<const std::uint8_t> bytes);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

// FNV-1a over dimensions and pixel bytes.
std::uint64_t image_digest(const cv::Mat& image);

}  // namespace synthcount
