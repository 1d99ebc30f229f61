#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ehsg/raster.hpp"
#include "ehsg/scene.hpp"

namespace ehsg {

namespace fs = std::filesystem;

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

// ---------------------------------------------------------------------------
// Atomic file writes: everything lands via temp-then-rename so interrupted
// runs never leave partial outputs behind.

inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), std::streamsize(bytes.size()));
        if (!out) throw DataError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

// ---------------------------------------------------------------------------
// PNG I/O (libpng)

namespace detail {

struct PngReader {
    FILE* file = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;

    explicit PngReader(const std::string& path) {
        file = std::fopen(path.c_str(), "rb");
        if (!file) throw DataError("cannot open PNG: " + path);
        png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        info = png ? png_create_info_struct(png) : nullptr;
        if (!png || !info) {
            close();
            throw DataError("libpng init failed for " + path);
        }
    }
    ~PngReader() { close(); }
    void close() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (file) std::fclose(file);
        png = nullptr;
        info = nullptr;
        file = nullptr;
    }
};

struct PngWriter {
    FILE* file = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;

    explicit PngWriter(const std::string& path) {
        file = std::fopen(path.c_str(), "wb");
        if (!file) throw DataError("cannot open PNG for writing: " + path);
        png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        info = png ? png_create_info_struct(png) : nullptr;
        if (!png || !info) {
            close();
            throw DataError("libpng init failed for " + path);
        }
    }
    ~PngWriter() { close(); }
    void close() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (file) std::fclose(file);
        png = nullptr;
        info = nullptr;
        file = nullptr;
    }
};

}  // namespace detail

// Any color PNG -> H x W x 3 doubles in [0,1].
inline Image<double> png_read_rgb(const std::string& path) {
    detail::PngReader r(path);
    if (setjmp(png_jmpbuf(r.png))) throw DataError("corrupt PNG: " + path);
    png_init_io(r.png, r.file);
    png_read_info(r.png, r.info);
    png_set_palette_to_rgb(r.png);
    png_set_expand_gray_1_2_4_to_8(r.png);
    png_set_gray_to_rgb(r.png);
    png_set_strip_alpha(r.png);
    png_set_strip_16(r.png);
    png_read_update_info(r.png, r.info);
    int w = int(png_get_image_width(r.png, r.info));
    int h = int(png_get_image_height(r.png, r.info));
    std::vector<std::uint8_t> row(std::size_t(w) * 3);
    Image<double> img(w, h, 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(r.png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(x, y, c) = row[std::size_t(x) * 3 + c] / 255.0;
    }
    return img;
}

inline void png_write_rgb8(const std::string& path, const Image<double>& img) {
    fs::path tmp = fs::path(path);
    tmp += ".tmp";
    {
        detail::PngWriter w(tmp.string());
        if (setjmp(png_jmpbuf(w.png))) throw DataError("PNG write failed: " + path);
        png_init_io(w.png, w.file);
        png_set_IHDR(w.png, w.info, png_uint_32(img.width), png_uint_32(img.height), 8,
                     PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                     PNG_FILTER_TYPE_DEFAULT);
        png_write_info(w.png, w.info);
        std::vector<std::uint8_t> row(std::size_t(img.width) * 3);
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c) {
                    double v = std::clamp(img.at(x, y, c), 0.0, 1.0);
                    row[std::size_t(x) * 3 + c] = std::uint8_t(std::lround(v * 255.0));
                }
            png_write_row(w.png, row.data());
        }
        png_write_end(w.png, nullptr);
    }
    fs::rename(tmp, path);
}

// Any PNG -> 8-bit single channel (first channel after gray conversion).
inline Image<std::uint8_t> png_read_gray8(const std::string& path) {
    detail::PngReader r(path);
    if (setjmp(png_jmpbuf(r.png))) throw DataError("corrupt PNG: " + path);
    png_init_io(r.png, r.file);
    png_read_info(r.png, r.info);
    png_set_palette_to_rgb(r.png);
    png_set_expand_gray_1_2_4_to_8(r.png);
    png_set_strip_alpha(r.png);
    png_set_strip_16(r.png);
    int color_type = png_get_color_type(r.png, r.info);
    if (color_type == PNG_COLOR_TYPE_RGB || color_type == PNG_COLOR_TYPE_RGB_ALPHA ||
        color_type == PNG_COLOR_TYPE_PALETTE)
        png_set_rgb_to_gray(r.png, PNG_ERROR_ACTION_NONE, -1, -1);
    png_read_update_info(r.png, r.info);
    int w = int(png_get_image_width(r.png, r.info));
    int h = int(png_get_image_height(r.png, r.info));
    std::vector<std::uint8_t> row(std::size_t(w), 0);
    Image<std::uint8_t> img(w, h, 1);
    for (int y = 0; y < h; ++y) {
        png_read_row(r.png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) img.at(x, y) = row[std::size_t(x)];
    }
    return img;
}

inline void png_write_gray8(const std::string& path, const Image<std::uint8_t>& img) {
    fs::path tmp = fs::path(path);
    tmp += ".tmp";
    {
        detail::PngWriter w(tmp.string());
        if (setjmp(png_jmpbuf(w.png))) throw DataError("PNG write failed: " + path);
        png_init_io(w.png, w.file);
        png_set_IHDR(w.png, w.info, png_uint_32(img.width), png_uint_32(img.height), 8,
                     PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                     PNG_FILTER_TYPE_DEFAULT);
        png_write_info(w.png, w.info);
        std::vector<std::uint8_t> row(std::size_t(img.width));
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) row[std::size_t(x)] = img.at(x, y);
            png_write_row(w.png, row.data());
        }
        png_write_end(w.png, nullptr);
    }
    fs::rename(tmp, path);
}

// 16-bit grayscale depth; stored value = round(depth * depth_scale).
inline Image<double> png_read_depth16(const std::string& path, double depth_scale) {
    detail::PngReader r(path);
    if (setjmp(png_jmpbuf(r.png))) throw DataError("corrupt PNG: " + path);
    png_init_io(r.png, r.file);
    png_read_info(r.png, r.info);
    if (png_get_bit_depth(r.png, r.info) != 16 ||
        png_get_color_type(r.png, r.info) != PNG_COLOR_TYPE_GRAY)
        throw DataError("expected 16-bit grayscale depth PNG: " + path);
    png_read_update_info(r.png, r.info);
    int w = int(png_get_image_width(r.png, r.info));
    int h = int(png_get_image_height(r.png, r.info));
    std::vector<std::uint8_t> row(std::size_t(w) * 2);
    Image<double> img(w, h, 1);
    for (int y = 0; y < h; ++y) {
        png_read_row(r.png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            // PNG stores 16-bit samples big-endian
            unsigned v = unsigned(row[std::size_t(x) * 2]) << 8 | row[std::size_t(x) * 2 + 1];
            img.at(x, y) = v / depth_scale;
        }
    }
    return img;
}

inline void png_write_depth16(const std::string& path, const Image<double>& depth,
                              double depth_scale) {
    fs::path tmp = fs::path(path);
    tmp += ".tmp";
    {
        detail::PngWriter w(tmp.string());
        if (setjmp(png_jmpbuf(w.png))) throw DataError("PNG write failed: " + path);
        png_init_io(w.png, w.file);
        png_set_IHDR(w.png, w.info, png_uint_32(depth.width), png_uint_32(depth.height), 16,
                     PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                     PNG_FILTER_TYPE_DEFAULT);
        png_write_info(w.png, w.info);
        std::vector<std::uint8_t> row(std::size_t(depth.width) * 2);
        for (int y = 0; y < depth.height; ++y) {
            for (int x = 0; x < depth.width; ++x) {
                double v = std::clamp(depth.at(x, y) * depth_scale, 0.0, 65535.0);
                unsigned q = unsigned(std::lround(v));
                row[std::size_t(x) * 2] = std::uint8_t(q >> 8);
                row[std::size_t(x) * 2 + 1] = std::uint8_t(q & 0xff);
            }
            png_write_row(w.png, row.data());
        }
        png_write_end(w.png, nullptr);
    }
    fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// PFM (portable float map), grayscale, little-endian (negative scale),
// scanlines bottom-to-top.

inline void pfm_write(const std::string& path, const Image<double>& depth) {
    std::string bytes;
    bytes += "Pf\n" + std::to_string(depth.width) + " " + std::to_string(depth.height) +
             "\n-1.0\n";
    bytes.reserve(bytes.size() + std::size_t(depth.width) * depth.height * 4);
    for (int y = depth.height - 1; y >= 0; --y)
        for (int x = 0; x < depth.width; ++x) {
            float v = float(depth.at(x, y));
            char buf[4];
            std::memcpy(buf, &v, 4);
            bytes.append(buf, 4);
        }
    write_file_atomic(path, bytes);
}

inline Image<double> pfm_read(const std::string& path) {
    std::string bytes = read_file(path);
    std::size_t pos = 0;
    auto token = [&]() -> std::string {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos)
            throw DataError("PFM parse error in " + path + " at byte offset " +
                            std::to_string(start) + ": unexpected end of header");
        return bytes.substr(start, pos - start);
    };
    std::string magic = token();
    if (magic != "Pf")
        throw DataError("PFM parse error in " + path + " at byte offset 0: bad magic '" +
                        magic + "' (grayscale 'Pf' expected)");
    int w = 0, h = 0;
    double scale = 0.0;
    try {
        w = std::stoi(token());
        h = std::stoi(token());
        scale = std::stod(token());
    } catch (const std::exception&) {
        throw DataError("PFM parse error in " + path + " at byte offset " + std::to_string(pos) +
                        ": bad dimensions or scale");
    }
    if (w <= 0 || h <= 0)
        throw DataError("PFM parse error in " + path + ": non-positive dimensions");
    if (scale >= 0.0)
        throw DataError("PFM parse error in " + path + ": big-endian data not supported");
    ++pos;  // single whitespace byte after the scale token
    std::size_t need = std::size_t(w) * h * 4;
    if (bytes.size() - pos < need)
        throw DataError("PFM parse error in " + path + " at byte offset " + std::to_string(pos) +
                        ": truncated pixel data");
    Image<double> depth(w, h, 1);
    for (int y = h - 1; y >= 0; --y)
        for (int x = 0; x < w; ++x) {
            float v;
            std::memcpy(&v, bytes.data() + pos, 4);
            pos += 4;
            depth.at(x, y) = double(v);
        }
    return depth;
}

// ---------------------------------------------------------------------------
// Dataset directory format:
//   config.txt        key=value camera intrinsics + depth format
//   images/%06d.png   8-bit RGB
//   depth/%06d.pfm    or 16-bit PNG per config
//   masks/%06d.png    8-bit gray, nonzero = tool pixel (excluded)
//   gt/trajectories.txt   synthetic scenes only

struct Dataset {
    Camera camera;
    std::string depth_format = "pfm";
    double depth_scale = 1000.0;
    std::vector<FrameSample> frames;
    std::vector<int> train_indices;
    std::vector<int> test_indices;
};

namespace detail {

inline std::string frame_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", index);
    return buf;
}

}  // namespace detail

inline Camera camera_from_kv(const KvMap& kv) {
    Camera cam;
    cam.width = int(kv_long(kv, "width", cam.width));
    cam.height = int(kv_long(kv, "height", cam.height));
    cam.fx = kv_double(kv, "fx", cam.fx);
    cam.fy = kv_double(kv, "fy", cam.fy);
    cam.cx = kv_double(kv, "cx", cam.cx);
    cam.cy = kv_double(kv, "cy", cam.cy);
    cam.znear = kv_double(kv, "znear", cam.znear);
    cam.zfar = kv_double(kv, "zfar", cam.zfar);
    cam.validate();
    return cam;
}

inline Dataset load_dataset(const std::string& dir) {
    fs::path root(dir);
    fs::path config_path = root / "config.txt";
    if (!fs::exists(config_path)) throw DataError("missing dataset config: " + config_path.string());
    KvMap kv = parse_kv_text(read_file(config_path), config_path.string());

    Dataset ds;
    ds.camera = camera_from_kv(kv);
    ds.depth_format = kv_string(kv, "depth_format", "pfm");
    ds.depth_scale = kv_double(kv, "depth_scale", 1000.0);
    if (ds.depth_format != "pfm" && ds.depth_format != "png16")
        throw DataError("unknown depth_format '" + ds.depth_format + "' in " +
                        config_path.string());

    int count = 0;
    while (fs::exists(root / "images" / (detail::frame_name(count) + ".png"))) ++count;
    if (count == 0) throw DataError("no frames found under " + (root / "images").string());

    ds.frames.resize(count);
    std::vector<std::string> errors(count);
    parallel_for(std::size_t(count), [&](std::size_t i) {
        try {
            std::string name = detail::frame_name(int(i));
            FrameSample& frame = ds.frames[i];
            frame.image = png_read_rgb((root / "images" / (name + ".png")).string());
            fs::path depth_path = root / "depth" /
                                  (name + (ds.depth_format == "pfm" ? ".pfm" : ".png"));
            if (!fs::exists(depth_path))
                throw DataError("missing depth file: " + depth_path.string());
            frame.depth = ds.depth_format == "pfm"
                              ? pfm_read(depth_path.string())
                              : png_read_depth16(depth_path.string(), ds.depth_scale);
            fs::path mask_path = root / "masks" / (name + ".png");
            if (!fs::exists(mask_path))
                throw DataError("missing mask file: " + mask_path.string());
            frame.tool_mask = png_read_gray8(mask_path.string());
            frame.timestamp = double(i) / double(count);
            if (frame.image.width != ds.camera.width || frame.image.height != ds.camera.height)
                throw DataError("frame " + name + " does not match configured size");
            frame.validate();
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });
    for (const auto& e : errors)
        if (!e.empty()) throw DataError(e);

    // 7:1 split: every 8th frame (index = 7 mod 8) is held out
    for (int i = 0; i < count; ++i)
        (i % 8 == 7 ? ds.test_indices : ds.train_indices).push_back(i);
    return ds;
}

inline void write_dataset_config(const std::string& dir, const Camera& cam,
                                 const std::string& depth_format, double depth_scale) {
    std::ostringstream os;
    os << "width=" << cam.width << "\nheight=" << cam.height << "\nfx=" << cam.fx
       << "\nfy=" << cam.fy << "\ncx=" << cam.cx << "\ncy=" << cam.cy << "\nznear=" << cam.znear
       << "\nzfar=" << cam.zfar << "\ndepth_format=" << depth_format
       << "\ndepth_scale=" << depth_scale << "\n";
    write_file_atomic(fs::path(dir) / "config.txt", os.str());
}

inline void write_frame(const std::string& dir, int index, const FrameSample& frame,
                        const std::string& depth_format, double depth_scale) {
    fs::path root(dir);
    std::string name = detail::frame_name(index);
    png_write_rgb8((root / "images" / (name + ".png")).string(), frame.image);
    if (depth_format == "pfm")
        pfm_write((root / "depth" / (name + ".pfm")).string(), frame.depth);
    else
        png_write_depth16((root / "depth" / (name + ".png")).string(), frame.depth, depth_scale);
    png_write_gray8((root / "masks" / (name + ".png")).string(), frame.tool_mask);
}

// ---------------------------------------------------------------------------
// Back-projected initialization: one Gaussian per stride-th valid non-tool
// pixel, colored from the image, sized from the local sample footprint.

inline GaussianCloud backproject_init(const FrameSample& frame, const Camera& cam,
                                      int stride = 2) {
    if (stride < 1) throw std::invalid_argument("backproject_init: stride must be >= 1");
    GaussianCloud cloud;
    for (int v = 0; v < frame.depth.height; v += stride)
        for (int u = 0; u < frame.depth.width; u += stride) {
            if (frame.tool_mask.at(u, v)) continue;
            double d = frame.depth.at(u, v);
            if (!(d > 0.0)) continue;
            Vec3 cam_pt((u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d);
            cloud.means.push_back(cam.cam_to_world(cam_pt));
            // neighbor samples sit one stride apart; their world-space gap
            // at this depth estimates the local point spacing
            double spacing = stride * d / cam.fx;
            cloud.raw_scales.push_back(Vec3::Constant(std::log(spacing)));
            cloud.rotations.push_back(Vec4(1, 0, 0, 0));
            cloud.raw_opacities.push_back(logit(0.5));
            cloud.colors.push_back(Vec3(frame.image.at(u, v, 0), frame.image.at(u, v, 1),
                                        frame.image.at(u, v, 2)));
        }
    if (cloud.count() == 0)
        throw DataError("backproject_init: frame has no valid non-tool depth pixels");
    cloud.validate();
    return cloud;
}

// ---------------------------------------------------------------------------
// Synthetic deformable scenes: a static background plane of Gaussians, blobs
// with sinusoidal trajectories confined to the dynamic side of the image,
// and blobs that appear or vanish at scripted times.

struct LifecycleEvent {
    bool appear = false;  // false = vanish at `time`
    double time = 0.5;
};

struct SynthSpec {
    int width = 128, height = 128;
    int frames = 64;
    std::uint64_t seed = 1;
    int plane_count = 1200;
    double plane_depth = 5.0;
    double static_fraction = 0.5;  // left fraction of the image that never moves
    int moving_count = 4;
    double amplitude = 0.5;   // world units
    double frequency = 1.0;   // trajectory cycles over t in [0,1]
    double blob_scale = 0.15;
    double event_blob_scale = 0.35;  // appearing/vanishing blobs are prominent
    double color_detail = 1.0;       // spatial frequency of the plane texture
    std::vector<LifecycleEvent> events;
    double fx = 100.0, fy = 100.0;
    double cx = 64.0, cy = 64.0;
    double znear = 0.01, zfar = 100.0;
    std::string depth_format = "pfm";
    double depth_scale = 1000.0;

    Camera camera() const {
        Camera cam;
        cam.width = width;
        cam.height = height;
        cam.fx = fx;
        cam.fy = fy;
        cam.cx = cx;
        cam.cy = cy;
        cam.znear = znear;
        cam.zfar = zfar;
        cam.validate();
        return cam;
    }
};

inline SynthSpec parse_synth_spec(const std::string& path) {
    KvMap kv = parse_kv_text(read_file(path), path);
    SynthSpec s;
    s.width = int(kv_long(kv, "width", s.width));
    s.height = int(kv_long(kv, "height", s.height));
    s.frames = int(kv_long(kv, "frames", s.frames));
    s.seed = std::uint64_t(kv_long(kv, "seed", long(s.seed)));
    s.plane_count = int(kv_long(kv, "plane_count", s.plane_count));
    s.plane_depth = kv_double(kv, "plane_depth", s.plane_depth);
    s.static_fraction = kv_double(kv, "static_fraction", s.static_fraction);
    s.moving_count = int(kv_long(kv, "moving_count", s.moving_count));
    s.amplitude = kv_double(kv, "amplitude", s.amplitude);
    s.frequency = kv_double(kv, "frequency", s.frequency);
    s.blob_scale = kv_double(kv, "blob_scale", s.blob_scale);
    s.event_blob_scale = kv_double(kv, "event_blob_scale", s.event_blob_scale);
    s.color_detail = kv_double(kv, "color_detail", s.color_detail);
    s.fx = kv_double(kv, "fx", s.fx);
    s.fy = kv_double(kv, "fy", s.fy);
    s.cx = kv_double(kv, "cx", double(s.width) / 2.0);
    s.cy = kv_double(kv, "cy", double(s.height) / 2.0);
    s.znear = kv_double(kv, "znear", s.znear);
    s.zfar = kv_double(kv, "zfar", s.zfar);
    s.depth_format = kv_string(kv, "depth_format", s.depth_format);
    s.depth_scale = kv_double(kv, "depth_scale", s.depth_scale);
    auto parse_times = [&](const std::string& key, bool appear) {
        std::string list = kv_string(kv, key, "");
        std::size_t pos = 0;
        while (pos < list.size()) {
            std::size_t comma = list.find(',', pos);
            if (comma == std::string::npos) comma = list.size();
            std::string item = trim(list.substr(pos, comma - pos));
            if (!item.empty()) s.events.push_back({appear, std::stod(item)});
            pos = comma + 1;
        }
    };
    parse_times("vanish_times", false);
    parse_times("appear_times", true);
    if (!(s.static_fraction >= 0.0 && s.static_fraction <= 1.0))
        throw DataError("static_fraction outside [0,1] in " + path);
    for (const LifecycleEvent& e : s.events)
        if (!(e.time >= 0.0 && e.time <= 1.0))
            throw DataError("lifecycle event time outside [0,1] in " + path);
    return s;
}

// Ground truth for one synthetic scene: canonical attributes plus scripted
// trajectories evaluated per frame.
struct SynthTruth {
    struct GaussianTrack {
        Vec3 base_mean;
        Vec3 color;
        double raw_scale;
        Vec3 motion_phase;     // per-axis phase; amplitude 0 = static
        Vec3 motion_amplitude;
        int event = -1;        // index into spec.events, -1 = always visible
    };
    std::vector<GaussianTrack> tracks;
    SynthSpec spec;

    Vec3 mean_at(std::size_t i, double t) const {
        const GaussianTrack& g = tracks[i];
        Vec3 m = g.base_mean;
        for (int a = 0; a < 3; ++a)
            m[a] += g.motion_amplitude[a] *
                    std::sin(kTwoPi * spec.frequency * t + g.motion_phase[a]);
        return m;
    }

    double opacity_at(std::size_t i, double t) const {
        const GaussianTrack& g = tracks[i];
        double visible = 0.95;
        double hidden = 1e-6;
        if (g.event < 0) return visible;
        const LifecycleEvent& e = spec.events[std::size_t(g.event)];
        bool on = e.appear ? (t >= e.time) : (t < e.time);
        return on ? visible : hidden;
    }

    RenderAttributes attributes_at(double t) const {
        RenderAttributes attrs;
        std::size_t n = tracks.size();
        attrs.means3d.resize(n);
        attrs.covariances3d.resize(n);
        attrs.opacities.resize(n);
        attrs.colors.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            attrs.means3d[i] = mean_at(i, t);
            attrs.covariances3d[i] =
                covariance3d(Vec3::Constant(tracks[i].raw_scale), Vec4(1, 0, 0, 0));
            attrs.opacities[i] = opacity_at(i, t);
            attrs.colors[i] = tracks[i].color;
        }
        return attrs;
    }
};

inline SynthTruth build_synth_truth(const SynthSpec& spec) {
    SynthTruth truth;
    truth.spec = spec;
    Camera cam = spec.camera();
    Rng rng(spec.seed);

    // world-space rect visible at the plane depth
    double z = spec.plane_depth;
    double wx0 = (0.0 - cam.cx) * z / cam.fx, wx1 = (cam.width - 1.0 - cam.cx) * z / cam.fx;
    double wy0 = (0.0 - cam.cy) * z / cam.fy, wy1 = (cam.height - 1.0 - cam.cy) * z / cam.fy;

    int grid = std::max(1, int(std::ceil(std::sqrt(double(spec.plane_count)))));
    double sx = (wx1 - wx0) / grid, sy = (wy1 - wy0) / grid;
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            SynthTruth::GaussianTrack g;
            double x = wx0 + (gx + 0.5) * sx + rng.uniform(-0.2, 0.2) * sx;
            double y = wy0 + (gy + 0.5) * sy + rng.uniform(-0.2, 0.2) * sy;
            g.base_mean = Vec3(x, y, z + rng.uniform(-0.02, 0.02));
            // banded color pattern with a little per-splat variation
            double k = spec.color_detail;
            g.color = Vec3(0.45 + 0.35 * std::sin(k * (2.1 * x + 0.4 * y)),
                           0.45 + 0.35 * std::sin(k * (1.3 * y + 2.9 * x) + 1.7),
                           0.45 + 0.35 * std::sin(k * 1.9 * (x + y) + 3.9));
            g.color += Vec3(rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04),
                            rng.uniform(-0.04, 0.04));
            g.color = g.color.cwiseMax(0.02).cwiseMin(0.98);
            g.raw_scale = std::log(0.75 * std::max(sx, sy));
            g.motion_amplitude = Vec3::Zero();
            g.motion_phase = Vec3::Zero();
            truth.tracks.push_back(g);
        }

    // dynamic-side world x range, with margin so moving blobs never cross
    // into the static side
    double split_wx = (spec.static_fraction * cam.width - cam.cx) * z / cam.fx;
    double margin = spec.amplitude + 2.0 * spec.blob_scale;
    double dyn_lo = std::min(split_wx + margin, wx1 - margin);
    double dyn_hi = std::max(wx1 - margin, dyn_lo);

    auto add_blob = [&](bool moving, int event_index) {
        SynthTruth::GaussianTrack g;
        g.base_mean = Vec3(rng.uniform(dyn_lo, dyn_hi),
                           rng.uniform(wy0 + margin, wy1 - margin), z - 0.6);
        g.color = Vec3(0.2 + 0.75 * rng.uniform(), 0.2 + 0.75 * rng.uniform(),
                       0.2 + 0.75 * rng.uniform());
        g.raw_scale = std::log(spec.blob_scale);
        if (moving && spec.static_fraction < 1.0) {
            g.motion_amplitude = Vec3(spec.amplitude, spec.amplitude, 0.4 * spec.amplitude);
            g.motion_phase = Vec3(rng.uniform(0.0, kTwoPi), rng.uniform(0.0, kTwoPi),
                                  rng.uniform(0.0, kTwoPi));
        } else {
            g.motion_amplitude = Vec3::Zero();
            g.motion_phase = Vec3::Zero();
            // lifecycle blobs sit still, large and saturated, so mishandling
            // the event costs real image area
            g.raw_scale = std::log(spec.event_blob_scale);
            g.color = Vec3(0.92, 0.12, 0.78);
        }
        g.event = event_index;
        truth.tracks.push_back(g);
    };

    for (int m = 0; m < spec.moving_count; ++m) add_blob(true, -1);
    for (std::size_t e = 0; e < spec.events.size(); ++e) add_blob(false, int(e));
    return truth;
}

inline void write_trajectories(const std::string& path, const SynthTruth& truth) {
    std::ostringstream os;
    os << "# frame gaussian x y z opacity\n";
    char line[160];
    for (int f = 0; f < truth.spec.frames; ++f) {
        double t = double(f) / double(truth.spec.frames);
        for (std::size_t i = 0; i < truth.tracks.size(); ++i) {
            Vec3 m = truth.mean_at(i, t);
            std::snprintf(line, sizeof line, "%d %zu %.9f %.9f %.9f %.9f\n", f, i, m.x(), m.y(),
                          m.z(), truth.opacity_at(i, t));
            os << line;
        }
    }
    write_file_atomic(path, os.str());
}

struct TrajectoryRecord {
    int frame;
    std::size_t gaussian;
    Vec3 mean;
    double opacity;
};

inline std::vector<TrajectoryRecord> load_trajectories(const std::string& path) {
    std::string text = read_file(path);
    std::vector<TrajectoryRecord> records;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        TrajectoryRecord rec;
        std::istringstream ls(line);
        if (!(ls >> rec.frame >> rec.gaussian >> rec.mean.x() >> rec.mean.y() >> rec.mean.z() >>
              rec.opacity))
            throw DataError("bad trajectory line in " + path + ": " + line);
        records.push_back(rec);
    }
    return records;
}

// Writes the full dataset directory; rendering uses the brute-force
// reference path so the files double as an oracle-produced target.
inline SynthTruth synth_generate(const SynthSpec& spec, const std::string& out_dir) {
    SynthTruth truth = build_synth_truth(spec);
    Camera cam = spec.camera();

    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "depth");
    fs::create_directories(fs::path(out_dir) / "masks");
    fs::create_directories(fs::path(out_dir) / "gt");

    write_dataset_config(out_dir, cam, spec.depth_format, spec.depth_scale);
    for (int f = 0; f < spec.frames; ++f) {
        double t = double(f) / double(spec.frames);
        RenderOutput render = rasterize_reference(cam, truth.attributes_at(t));
        FrameSample frame;
        frame.image = render.color;
        frame.depth = render.depth;
        frame.tool_mask = Image<std::uint8_t>(cam.width, cam.height, 1, 0);
        frame.timestamp = t;
        write_frame(out_dir, f, frame, spec.depth_format, spec.depth_scale);
    }
    write_trajectories((fs::path(out_dir) / "gt" / "trajectories.txt").string(), truth);
    return truth;
}

}  // namespace ehsg
