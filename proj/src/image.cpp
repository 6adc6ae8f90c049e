#include "synthcount/image.hpp"

#include <sodium.h>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "synthcount/errors.hpp"

namespace synthcount {

cv::Mat resize_image(const cv::Mat& image, int height, int width) {
    if (image.empty() || height <= 0 || width <= 0) {
        throw Error(ErrorCode::BadShape, "cannot resize empty image or to non-positive size");
    }
    if (image.rows == height && image.cols == width) return image.clone();
    const bool shrinking = height <= image.rows && width <= image.cols;
    cv::Mat out;
    cv::resize(image, out, cv::Size(width, height), 0, 0,
               shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
    return out;
}

cv::Mat crop(const cv::Mat& image, const Box& box) {
    if (box.x < 0 || box.y < 0 || box.width <= 0 || box.height <= 0 ||
        box.x + box.width > image.cols || box.y + box.height > image.rows) {
        throw Error(ErrorCode::BadShape, "crop box outside image");
    }
    return image(cv::Rect(box.x, box.y, box.width, box.height)).clone();
}

void write_png(const std::filesystem::path& path, const cv::Mat& image) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), image)) {
        throw Error(ErrorCode::IoError, "failed to write " + path.string());
    }
}

cv::Mat read_image(const std::filesystem::path& path) {
    cv::Mat image = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (image.empty()) throw Error(ErrorCode::IoError, "cannot decode image " + path.string());
    return image;
}

std::vector<std::uint8_t> encode_png(const cv::Mat& image) {
    std::vector<std::uint8_t> bytes;
    if (!cv::imencode(".png", image, bytes)) throw Error(ErrorCode::IoError, "png encode failed");
    return bytes;
}

cv::Mat decode_image(std::span<const std::uint8_t> bytes) {
    const cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1,
                      const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat image = cv::imdecode(raw, cv::IMREAD_COLOR);
    if (image.empty()) throw Error(ErrorCode::IoError, "cannot decode image bytes");
    return image;
}

namespace {

void ensure_sodium() {
    static const int status = sodium_init();
    if (status < 0) throw Error(ErrorCode::IoError, "libsodium initialisation failed");
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    ensure_sodium();
    const auto variant = sodium_base64_VARIANT_ORIGINAL;
    std::string out(sodium_base64_ENCODED_LEN(bytes.size(), variant), '\0');
    sodium_bin2base64(out.data(), out.size(), bytes.data(), bytes.size(), variant);
    out.resize(out.size() - 1);  // drop the terminating NUL
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    ensure_sodium();
    std::vector<std::uint8_t> out(text.size() * 3 / 4 + 3);
    size_t written = 0;
    if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), " \r\n", &written,
                          nullptr, sodium_base64_VARIANT_ORIGINAL) != 0) {
        throw Error(ErrorCode::IoError, "invalid base64 payload");
    }
    out.resize(written);
    return out;
}

std::uint64_t image_digest(const cv::Mat& image) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](std::uint8_t byte) {
        h ^= byte;
        h *= 0x100000001b3ULL;
    };
    for (int v : {image.rows, image.cols, image.type()}) {
        for (int s = 0; s < 32; s += 8) feed(static_cast<std::uint8_t>(v >> s));
    }
    const auto row_bytes = static_cast<size_t>(image.cols) * image.elemSize();
    for (int r = 0; r < image.rows; ++r) {
        const auto* p = image.ptr<std::uint8_t>(r);
        for (size_t i = 0; i < row_bytes; ++i) feed(p[i]);
    }
    return h;
}

}  // namespace synthcount
