#pragma once

#include "ehsg/data.hpp"
#include "ehsg/train.hpp"

namespace ehsg {

// ---------------------------------------------------------------------------
// Checkpoint container: "EHSG" magic, format version, counts, then
// little-endian float32 tensors in declared order (cloud, field, mask
// regions, optimizer state). Written atomically.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

struct ByteWriter {
    std::string bytes;

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(char((v >> (8 * i)) & 0xff));
    }
    void i32(std::int32_t v) { u32(std::uint32_t(v)); }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(char((v >> (8 * i)) & 0xff));
    }
    void i64(std::int64_t v) { u64(std::uint64_t(v)); }
    void f32(double v) {
        float f = float(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        u32(bits);
    }
    void tensor(const double* data, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) f32(data[i]);
    }
    void tensor(const std::vector<double>& v) { tensor(v.data(), v.size()); }
};

struct ByteReader {
    const std::string& bytes;
    std::size_t pos = 0;
    std::string origin;

    void need(std::size_t n) {
        if (pos + n > bytes.size())
            throw DataError("truncated checkpoint " + origin + " at byte " +
                            std::to_string(pos));
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::int32_t i32() { return std::int32_t(u32()); }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(bytes[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::int64_t i64() { return std::int64_t(u64()); }
    double f32() {
        std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return double(f);
    }
    void tensor(double* data, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) data[i] = f32();
    }
    void tensor(std::vector<double>& v) { tensor(v.data(), v.size()); }
};

inline void write_field_group(ByteWriter& w, const AttributeField& f) {
    w.tensor(f.weights);
    w.tensor(f.centers);
    w.tensor(f.widths);
}

inline void read_field_group(ByteReader& r, AttributeField& f) {
    r.tensor(f.weights);
    r.tensor(f.centers);
    r.tensor(f.widths);
}

inline void write_adam(ByteWriter& w, const AdamTensor& t) {
    w.tensor(t.m);
    w.tensor(t.v);
}

inline void read_adam(ByteReader& r, AdamTensor& t) {
    r.tensor(t.m);
    r.tensor(t.v);
}

}  // namespace detail

struct Checkpoint {
    GaussianCloud cloud;
    DeformField field;
    MotionMask mask;
    OptimizerState optimizer;
    std::uint64_t iteration = 0;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    detail::ByteWriter w;
    w.bytes = "EHSG";
    w.u32(kCheckpointVersion);
    std::size_t n = ckpt.cloud.count();
    w.u64(n);
    w.u32(std::uint32_t(ckpt.field.basis()));
    w.u32(std::uint32_t(ckpt.field.lifecycle_mode));
    w.u64(ckpt.iteration);

    w.tensor(n ? ckpt.cloud.means.data()->data() : nullptr, 3 * n);
    w.tensor(n ? ckpt.cloud.raw_scales.data()->data() : nullptr, 3 * n);
    w.tensor(n ? ckpt.cloud.rotations.data()->data() : nullptr, 4 * n);
    w.tensor(ckpt.cloud.raw_opacities);
    w.tensor(n ? ckpt.cloud.colors.data()->data() : nullptr, 3 * n);

    detail::write_field_group(w, ckpt.field.position);
    detail::write_field_group(w, ckpt.field.rotation);
    detail::write_field_group(w, ckpt.field.scale);
    detail::write_field_group(w, ckpt.field.opacity);

    const MotionMask& m = ckpt.mask;
    w.i32(m.image_width);
    w.i32(m.image_height);
    w.i32(m.grid_n);
    w.f32(m.update_interval);
    w.f32(m.last_update_loss);
    w.i64(m.next_update_iter);
    w.i32(m.next_region_id);
    w.u32(std::uint32_t(m.regions.size()));
    for (const Region& r : m.regions) {
        w.i32(r.id);
        w.i32(r.x0);
        w.i32(r.y0);
        w.i32(r.x1);
        w.i32(r.y1);
        w.i32(std::int32_t(r.status));
        w.i32(r.depth);
    }

    const OptimizerState& o = ckpt.optimizer;
    w.u64(std::uint64_t(o.step));
    detail::write_adam(w, o.means);
    detail::write_adam(w, o.raw_scales);
    detail::write_adam(w, o.rotations);
    detail::write_adam(w, o.raw_opacities);
    detail::write_adam(w, o.colors);
    for (const OptimizerState::FieldState* fs :
         {&o.position, &o.rotation, &o.scale, &o.opacity}) {
        detail::write_adam(w, fs->weights);
        detail::write_adam(w, fs->centers);
        detail::write_adam(w, fs->widths);
    }

    write_file_atomic(path, w.bytes);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::string bytes = read_file(path);
    detail::ByteReader r{bytes, 0, path};
    r.need(4);
    if (bytes.compare(0, 4, "EHSG") != 0)
        throw DataError("not a checkpoint (bad magic): " + path);
    r.pos = 4;
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " +
                        path);

    Checkpoint ckpt;
    std::size_t n = std::size_t(r.u64());
    int basis = int(r.u32());
    std::uint32_t mode = r.u32();
    if (mode > 2) throw DataError("bad lifecycle mode in checkpoint: " + path);
    ckpt.iteration = r.u64();

    ckpt.cloud.resize(n);
    ckpt.field = init_field(n, basis, LifecycleMode(mode));
    r.tensor(n ? ckpt.cloud.means.data()->data() : nullptr, 3 * n);
    r.tensor(n ? ckpt.cloud.raw_scales.data()->data() : nullptr, 3 * n);
    r.tensor(n ? ckpt.cloud.rotations.data()->data() : nullptr, 4 * n);
    r.tensor(ckpt.cloud.raw_opacities);
    r.tensor(n ? ckpt.cloud.colors.data()->data() : nullptr, 3 * n);

    detail::read_field_group(r, ckpt.field.position);
    detail::read_field_group(r, ckpt.field.rotation);
    detail::read_field_group(r, ckpt.field.scale);
    detail::read_field_group(r, ckpt.field.opacity);

    MotionMask& m = ckpt.mask;
    m.image_width = r.i32();
    m.image_height = r.i32();
    m.grid_n = r.i32();
    m.update_interval = r.f32();
    m.last_update_loss = r.f32();
    m.next_update_iter = r.i64();
    m.next_region_id = r.i32();
    std::uint32_t nregions = r.u32();
    m.regions.resize(nregions);
    for (Region& reg : m.regions) {
        reg.id = r.i32();
        reg.x0 = r.i32();
        reg.y0 = r.i32();
        reg.x1 = r.i32();
        reg.y1 = r.i32();
        reg.status = RegionStatus(r.i32());
        reg.depth = r.i32();
    }

    OptimizerState& o = ckpt.optimizer;
    o.resize(n, ckpt.field);
    o.step = long(r.u64());
    detail::read_adam(r, o.means);
    detail::read_adam(r, o.raw_scales);
    detail::read_adam(r, o.rotations);
    detail::read_adam(r, o.raw_opacities);
    detail::read_adam(r, o.colors);
    for (OptimizerState::FieldState* fs : {&o.position, &o.rotation, &o.scale, &o.opacity}) {
        detail::read_adam(r, fs->weights);
        detail::read_adam(r, fs->centers);
        detail::read_adam(r, fs->widths);
    }
    if (r.pos != bytes.size())
        throw DataError("trailing bytes in checkpoint: " + path);
    ckpt.cloud.validate();
    return ckpt;
}

}  // namespace ehsg
