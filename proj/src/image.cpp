#include "mbt/image.hpp"

#include <cctype>
#include <fstream>

namespace mbt {

namespace {

// Reads one whitespace-delimited integer token, skipping '#' comments.
int read_header_int(std::istream& in, const std::string& path) {
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        if (ch != EOF) ch = in.get();
    }
    if (ch == EOF || !std::isdigit(ch)) throw FormatError("ppm: malformed header in " + path);
    long value = 0;
    while (ch != EOF && std::isdigit(ch)) {
        value = value * 10 + (ch - '0');
        if (value > 1'000'000'000L) throw FormatError("ppm: header value out of range in " + path);
        ch = in.get();
    }
    if (ch != EOF) in.unget();
    return static_cast<int>(value);
}

}  // namespace

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("ppm: cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '6') throw FormatError("ppm: not a P6 file: " + path);

    const int width = read_header_int(in, path);
    const int height = read_header_int(in, path);
    const int maxval = read_header_int(in, path);
    if (width < 1 || height < 1) throw FormatError("ppm: bad dimensions in " + path);
    if (maxval != 255) throw FormatError("ppm: unsupported maxval " + std::to_string(maxval) + " in " + path);

    // Exactly one whitespace byte separates the header from the payload.
    const int sep = in.get();
    if (sep == EOF || !std::isspace(sep)) throw FormatError("ppm: malformed header in " + path);

    Image img(width, height);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (static_cast<size_t>(in.gcount()) != img.pixels.size())
        throw FormatError("ppm: truncated payload in " + path);
    return img;
}

void write_ppm(const Image& img, const std::string& path) {
    if (img.width < 1 || img.height < 1) throw ValueError("ppm: cannot write empty image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("ppm: cannot write " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw FormatError("ppm: write failed for " + path);
}

}  // namespace mbt
