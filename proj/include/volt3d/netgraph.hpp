#pragma once

// Architecture descriptions and their runtime realization. A ModelSpec is a
// flat layer list that can be parameter-counted without allocating weights;
// build_runtime() turns it into a Model with live tensors, forward/backward
// and named parameters. The builders cover the reconstruction decoders
// (Rec/ResRec at depths 6 and 16) and the VGG-style voxel classifiers at
// depths 13/16/19, each in the three convolution flavors.

#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "volt3d/cost_model.hpp"
#include "volt3d/kernels.hpp"
#include "volt3d/tensor.hpp"

namespace volt3d {

enum class ConvFlavor { standard, pseudo, dw };

inline std::string flavor_name(ConvFlavor f) {
    switch (f) {
        case ConvFlavor::standard: return "standard";
        case ConvFlavor::pseudo: return "pseudo";
        case ConvFlavor::dw: return "dw";
    }
    return "?";
}

inline ConvFlavor parse_flavor(const std::string& s) {
    if (s == "standard") return ConvFlavor::standard;
    if (s == "pseudo") return ConvFlavor::pseudo;
    if (s == "dw") return ConvFlavor::dw;
    throw std::invalid_argument("unknown flavor '" + s + "' (standard|pseudo|dw)");
}

enum class LayerKind { dense, reshape, conv_transpose, conv_unit, final_conv, max_pool, flatten };

struct LayerSpec {
    LayerKind kind;
    std::string name;
    // conv_unit / conv_transpose / final_conv
    std::size_t k = 3;
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    std::size_t stride = 1;
    // dense
    std::size_t in_features = 0;
    std::size_t out_features = 0;
    bool relu_after = false;
    // reshape target (without the batch axis)
    Shape reshape_to;
    // max_pool
    std::size_t window = 2;
    // conv units sharing a non-negative id form one residual block
    int residual_group = -1;
    // layers that sit outside the published decoder table (the encoder-side
    // fully connected bridge)
    bool counted = true;
};

struct ModelSpec {
    std::string arch;
    ConvFlavor flavor = ConvFlavor::standard;
    std::vector<LayerSpec> layers;
};

// ---------------------------------------------------------------------------
// Parameter accounting (spec level, no tensors involved)
// ---------------------------------------------------------------------------

inline std::uint64_t layer_param_count(const LayerSpec& layer, ConvFlavor flavor) {
    switch (layer.kind) {
        case LayerKind::conv_unit:
            switch (flavor) {
                case ConvFlavor::standard:
                    return params_conv_bn(layer.k, layer.c_in, layer.c_out);
                case ConvFlavor::pseudo:
                    return params_pseudo_block(layer.k, layer.c_in, layer.c_out);
                case ConvFlavor::dw:
                    return params_dwsep_block(layer.k, layer.c_in, layer.c_out);
            }
            return 0;
        case LayerKind::conv_transpose:
            return params_convtranspose_bn(layer.k, layer.c_in, layer.c_out);
        case LayerKind::final_conv:
            return params_conv1x1(layer.c_in, layer.c_out);
        case LayerKind::dense:
            return params_dense(layer.in_features, layer.out_features);
        case LayerKind::reshape:
        case LayerKind::max_pool:
        case LayerKind::flatten:
            return 0;
    }
    return 0;
}

struct CostRow {
    std::string name;
    std::string kind;
    std::uint64_t params = 0;
    bool flavored = false;  // counts toward the "conv layers" subtotal
    bool counted = true;    // counts toward the table total
};

struct CostReport {
    std::string arch;
    ConvFlavor flavor = ConvFlavor::standard;
    std::vector<CostRow> rows;
    std::uint64_t conv_params = 0;   // flavored conv layers only
    std::uint64_t table_total = 0;   // everything the published table counts
    std::uint64_t all_params = 0;    // every learnable parameter in the model
};

inline const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::reshape: return "reshape";
        case LayerKind::conv_transpose: return "conv_transpose";
        case LayerKind::conv_unit: return "conv";
        case LayerKind::final_conv: return "final_conv";
        case LayerKind::max_pool: return "max_pool";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

inline CostReport cost_report(const ModelSpec& spec) {
    CostReport report;
    report.arch = spec.arch;
    report.flavor = spec.flavor;
    for (const auto& layer : spec.layers) {
        CostRow row;
        row.name = layer.name;
        row.kind = kind_name(layer.kind);
        row.params = layer_param_count(layer, spec.flavor);
        row.flavored = layer.kind == LayerKind::conv_unit;
        row.counted = layer.counted;
        if (row.flavored) report.conv_params = checked_add(report.conv_params, row.params);
        if (row.counted) report.table_total = checked_add(report.table_total, row.params);
        report.all_params = checked_add(report.all_params, row.params);
        report.rows.push_back(std::move(row));
    }
    return report;
}

inline std::string render_cost_table(const CostReport& report) {
    std::ostringstream os;
    os << report.arch << " (" << flavor_name(report.flavor) << ")\n";
    std::size_t name_w = 5;
    for (const auto& row : report.rows) name_w = std::max(name_w, row.name.size());
    os << std::string(name_w, '-') << "  --------------  ------------\n";
    for (const auto& row : report.rows) {
        os << row.name << std::string(name_w - row.name.size(), ' ') << "  " << row.kind;
        os << std::string(row.kind.size() < 14 ? 14 - row.kind.size() : 1, ' ');
        os << group_digits(row.params);
        if (!row.counted) os << "  (not in table total)";
        os << "\n";
    }
    os << std::string(name_w, '-') << "  --------------  ------------\n";
    os << "conv layers:  " << group_digits(report.conv_params) << "\n";
    os << "table total:  " << group_digits(report.table_total) << "\n";
    if (report.all_params != report.table_total) {
        os << "all params:   " << group_digits(report.all_params) << "\n";
    }
    return os.str();
}

inline std::string render_cost_csv(const CostReport& report) {
    std::ostringstream os;
    os << "layer,kind,params\n";
    for (const auto& row : report.rows) {
        os << row.name << "," << row.kind << "," << row.params << "\n";
    }
    os << "conv_subtotal,," << report.conv_params << "\n";
    os << "table_total,," << report.table_total << "\n";
    os << "all_params,," << report.all_params << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

// Upsampling decoder: latent 2048 -> fc 1024 -> transposed convs to
// (256,4^3) -> (128,8^3) -> (64,16^3) -> (32,32^3), with flavored conv
// blocks between the upsampling steps, then a 1x1x1 projection to one
// channel of logits. depth counts the flavored convs: 6 or 16. The fully
// connected bridge belongs to the encoder side, so it stays out of the
// published decoder totals.
inline ModelSpec build_rec_decoder(int depth, bool residual, ConvFlavor flavor) {
    if (depth != 6 && depth != 16) {
        throw std::invalid_argument("rec decoder depth must be 6 or 16");
    }
    ModelSpec spec;
    spec.arch = std::string(residual ? "resrec" : "rec") + std::to_string(depth);
    spec.flavor = flavor;

    LayerSpec fc{LayerKind::dense, "fc"};
    fc.in_features = 2048;
    fc.out_features = 1024;
    fc.relu_after = true;
    fc.counted = false;
    spec.layers.push_back(fc);

    LayerSpec reshape{LayerKind::reshape, "reshape"};
    reshape.reshape_to = {1024, 1, 1, 1};
    reshape.counted = false;
    spec.layers.push_back(reshape);

    const std::size_t stage_channels[4] = {256, 128, 64, 32};
    const std::size_t pairs_per_stage = depth == 6 ? 1 : 2;
    int group = 0;
    std::size_t c_prev = 1024;
    for (std::size_t stage = 0; stage < 4; ++stage) {
        const std::size_t c = stage_channels[stage];
        LayerSpec ct{LayerKind::conv_transpose, "convtrans" + std::to_string(stage + 1)};
        ct.k = stage == 0 ? 4 : 2;
        ct.stride = stage == 0 ? 1 : 2;
        ct.c_in = c_prev;
        ct.c_out = c;
        spec.layers.push_back(ct);
        c_prev = c;

        // Depth 6 leaves the final 32-channel stage without conv blocks.
        const bool has_blocks = depth == 16 || stage < 3;
        if (!has_blocks) continue;
        for (std::size_t pair = 0; pair < pairs_per_stage; ++pair) {
            for (std::size_t half = 0; half < 2; ++half) {
                LayerSpec unit{LayerKind::conv_unit,
                               "conv" + std::to_string(stage + 1) + "_" +
                                   std::to_string(pair * 2 + half + 1)};
                unit.k = 3;
                unit.c_in = c;
                unit.c_out = c;
                if (residual) unit.residual_group = group;
                spec.layers.push_back(unit);
            }
            ++group;
        }
    }

    LayerSpec head{LayerKind::final_conv, "conv5"};
    head.k = 1;
    head.c_in = c_prev;
    head.c_out = 1;
    spec.layers.push_back(head);
    return spec;
}

// VGG-style voxel classifier. depth in {13, 16, 19} selects the number of
// flavored convs per stage; every stage ends with a 2x2x2 max-pool unless the
// spatial extent has already collapsed to one voxel (small test resolutions).
inline ModelSpec build_vgg3d(int depth, ConvFlavor flavor, std::size_t resolution = 64,
                             std::size_t classes = 13) {
    std::vector<std::size_t> per_stage;
    switch (depth) {
        case 13: per_stage = {2, 2, 2, 2, 2}; break;
        case 16: per_stage = {2, 2, 3, 3, 3}; break;
        case 19: per_stage = {2, 2, 4, 4, 4}; break;
        default: throw std::invalid_argument("vgg depth must be 13, 16 or 19");
    }
    if (resolution < 1) throw std::invalid_argument("vgg resolution must be positive");

    ModelSpec spec;
    spec.arch = "vgg" + std::to_string(depth);
    spec.flavor = flavor;
    const std::size_t stage_channels[5] = {64, 128, 256, 512, 512};
    std::size_t c_prev = 1;
    std::size_t extent = resolution;
    for (std::size_t stage = 0; stage < 5; ++stage) {
        for (std::size_t i = 0; i < per_stage[stage]; ++i) {
            LayerSpec unit{LayerKind::conv_unit, "conv" + std::to_string(stage + 1) + "_" +
                                                     std::to_string(i + 1)};
            unit.k = 3;
            unit.c_in = c_prev;
            unit.c_out = stage_channels[stage];
            spec.layers.push_back(unit);
            c_prev = stage_channels[stage];
        }
        if (extent >= 2) {
            LayerSpec pool{LayerKind::max_pool, "pool" + std::to_string(stage + 1)};
            pool.window = 2;
            pool.stride = 2;
            spec.layers.push_back(pool);
            extent /= 2;
        }
    }

    LayerSpec flat{LayerKind::flatten, "flatten"};
    spec.layers.push_back(flat);

    const std::size_t flat_features = c_prev * extent * extent * extent;
    const std::size_t widths[3] = {4096, 4096, classes};
    std::size_t in = flat_features;
    for (std::size_t i = 0; i < 3; ++i) {
        LayerSpec fc{LayerKind::dense, "fc" + std::to_string(i + 1)};
        fc.in_features = in;
        fc.out_features = widths[i];
        fc.relu_after = i < 2;
        spec.layers.push_back(fc);
        in = widths[i];
    }
    return spec;
}

// Small classifier used by smoke workloads: two flavored conv stages with
// pooling and one dense head. Cheap enough to train on a single core.
inline ModelSpec build_tiny_classifier(ConvFlavor flavor, std::size_t resolution,
                                       std::size_t classes) {
    ModelSpec spec;
    spec.arch = "tiny";
    spec.flavor = flavor;
    const std::size_t chans[2] = {8, 16};
    std::size_t c_prev = 1;
    std::size_t extent = resolution;
    for (std::size_t stage = 0; stage < 2; ++stage) {
        LayerSpec unit{LayerKind::conv_unit,
                       "conv" + std::to_string(stage + 1) + "_1"};
        unit.k = 3;
        unit.c_in = c_prev;
        unit.c_out = chans[stage];
        spec.layers.push_back(unit);
        c_prev = chans[stage];
        if (extent >= 2) {
            LayerSpec pool{LayerKind::max_pool, "pool" + std::to_string(stage + 1)};
            spec.layers.push_back(pool);
            extent /= 2;
        }
    }
    spec.layers.push_back(LayerSpec{LayerKind::flatten, "flatten"});
    LayerSpec fc{LayerKind::dense, "fc1"};
    fc.in_features = c_prev * extent * extent * extent;
    fc.out_features = classes;
    spec.layers.push_back(fc);
    return spec;
}

inline ModelSpec build_spec(const std::string& arch, ConvFlavor flavor,
                            std::size_t resolution = 64, std::size_t classes = 13) {
    if (arch == "rec6") return build_rec_decoder(6, false, flavor);
    if (arch == "resrec6") return build_rec_decoder(6, true, flavor);
    if (arch == "rec16") return build_rec_decoder(16, false, flavor);
    if (arch == "resrec16") return build_rec_decoder(16, true, flavor);
    if (arch == "vgg13") return build_vgg3d(13, flavor, resolution, classes);
    if (arch == "vgg16") return build_vgg3d(16, flavor, resolution, classes);
    if (arch == "vgg19") return build_vgg3d(19, flavor, resolution, classes);
    if (arch == "tiny") return build_tiny_classifier(flavor, resolution, classes);
    throw std::invalid_argument("unknown architecture '" + arch + "'");
}

// ---------------------------------------------------------------------------
// Runtime model
// ---------------------------------------------------------------------------

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* value = nullptr;
    Tensor<T>* grad = nullptr;
};

template <typename T>
class Layer {
public:
    explicit Layer(std::string name) : name_(std::move(name)) {}
    virtual ~Layer() = default;

    const std::string& name() const { return name_; }
    virtual Tensor<T> forward(const Tensor<T>& x, bool training) = 0;
    virtual Tensor<T> backward(const Tensor<T>& dy) = 0;
    virtual void collect_params(std::vector<ParamRef<T>>& out) {}
    virtual void set_bn_mode(BnMode mode) {}

protected:
    std::string name_;
};

template <typename T>
class DenseLayer final : public Layer<T> {
public:
    DenseLayer(const LayerSpec& spec, Seed seed)
        : Layer<T>(spec.name),
          w_(Tensor<T>::randn({spec.out_features, spec.in_features}, seed,
                              std::sqrt(2.0 / static_cast<double>(spec.in_features)))),
          b_({spec.out_features}),
          dw_(w_.shape()),
          db_(b_.shape()),
          relu_after_(spec.relu_after) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) override {
        if (training) x_ = x;
        Tensor<T> y = fully_connected(x, w_, b_);
        if (relu_after_) {
            y = relu(y);
            if (training) y_ = y;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        Tensor<T> g = relu_after_ ? relu_backward(dy, y_) : dy;
        auto grads = fully_connected_backward(g, x_, w_);
        dw_ = std::move(grads.weights);
        db_ = std::move(grads.bias);
        return std::move(grads.input);
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        out.push_back({this->name_ + ".weights", &w_, &dw_});
        out.push_back({this->name_ + ".bias", &b_, &db_});
    }

private:
    Tensor<T> w_, b_, dw_, db_;
    Tensor<T> x_, y_;
    bool relu_after_;
};

template <typename T>
class ReshapeLayer final : public Layer<T> {
public:
    ReshapeLayer(const LayerSpec& spec) : Layer<T>(spec.name), target_(spec.reshape_to) {}

    Tensor<T> forward(const Tensor<T>& x, bool) override {
        in_shape_ = x.shape();
        Shape full{x.extent(0)};
        full.insert(full.end(), target_.begin(), target_.end());
        return x.reshaped(full);
    }

    Tensor<T> backward(const Tensor<T>& dy) override { return dy.reshaped(in_shape_); }

private:
    Shape target_;
    Shape in_shape_;
};

template <typename T>
class FlattenLayer final : public Layer<T> {
public:
    explicit FlattenLayer(const LayerSpec& spec) : Layer<T>(spec.name) {}

    Tensor<T> forward(const Tensor<T>& x, bool) override {
        in_shape_ = x.shape();
        return x.reshaped({x.extent(0), x.size() / x.extent(0)});
    }

    Tensor<T> backward(const Tensor<T>& dy) override { return dy.reshaped(in_shape_); }

private:
    Shape in_shape_;
};

template <typename T>
class MaxPoolLayer final : public Layer<T> {
public:
    explicit MaxPoolLayer(const LayerSpec& spec)
        : Layer<T>(spec.name), window_(spec.window), stride_(spec.stride == 1 ? spec.window : spec.stride) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) override {
        return maxpool3d(x, window_, stride_, training ? &cache_ : nullptr);
    }

    Tensor<T> backward(const Tensor<T>& dy) override { return maxpool3d_backward(dy, cache_); }

private:
    std::size_t window_, stride_;
    MaxPoolCache cache_;
};

// Transposed conv -> batchnorm -> ReLU.
template <typename T>
class ConvTransposeLayer final : public Layer<T> {
public:
    ConvTransposeLayer(const LayerSpec& spec, Seed seed)
        : Layer<T>(spec.name),
          w_(Tensor<T>::randn({spec.c_in, spec.c_out, spec.k, spec.k, spec.k}, seed,
                              std::sqrt(2.0 / static_cast<double>(spec.c_in * spec.k * spec.k *
                                                                  spec.k)))),
          dw_(w_.shape()),
          bn_(spec.c_out),
          dgamma_({spec.c_out}),
          dbeta_({spec.c_out}),
          stride_(spec.stride) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) override {
        if (training) x_ = x;
        Tensor<T> y = convtranspose3d_forward(x, w_, stride_);
        y = batchnorm_forward(y, bn_, training ? &bn_cache_ : nullptr);
        y = relu(y);
        if (training) y_ = y;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        Tensor<T> g = relu_backward(dy, y_);
        auto bn_grads = batchnorm_backward(g, bn_, bn_cache_);
        dgamma_ = std::move(bn_grads.gamma);
        dbeta_ = std::move(bn_grads.beta);
        auto grads = convtranspose3d_backward(bn_grads.input, x_, w_, stride_);
        dw_ = std::move(grads.weights);
        return std::move(grads.input);
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        out.push_back({this->name_ + ".weights", &w_, &dw_});
        out.push_back({this->name_ + ".bn.gamma", &bn_.gamma, &dgamma_});
        out.push_back({this->name_ + ".bn.beta", &bn_.beta, &dbeta_});
    }

    void set_bn_mode(BnMode mode) override { bn_.mode = mode; }

private:
    Tensor<T> w_, dw_;
    BatchNormState<T> bn_;
    Tensor<T> dgamma_, dbeta_;
    BnCache<T> bn_cache_;
    Tensor<T> x_, y_;
    std::size_t stride_;
};

// One flavored convolution unit. Standard: conv/bn/relu. Separable:
// depthwise/bn/relu/pointwise/bn/relu. Pseudo: horizontal/bn/relu/vertical/
// bn/relu. A residual wrapper may ask the unit to hold its last ReLU so the
// skip can be added first.
template <typename T>
class ConvUnitLayer final : public Layer<T> {
public:
    ConvUnitLayer(const LayerSpec& spec, ConvFlavor flavor, Seed seed)
        : Layer<T>(spec.name), flavor_(flavor), k_(spec.k) {
        const std::size_t ci = spec.c_in, co = spec.c_out;
        switch (flavor_) {
            case ConvFlavor::standard:
                std_kernel_ = StdKernel<T>::he_init(co, ci, k_, seed);
                d_std_ = Tensor<T>(std_kernel_.weights.shape());
                bn2_ = std::make_unique<BatchNormState<T>>(co);
                break;
            case ConvFlavor::dw:
                dw_kernel_ = DepthwiseKernel<T>::he_init(ci, k_, seed);
                pw_kernel_ = PointwiseKernel<T>::he_init(co, ci, subseed(seed, 1));
                d_dw_w_ = Tensor<T>(dw_kernel_.weights.shape());
                d_dw_b_ = Tensor<T>(dw_kernel_.bias.shape());
                d_pw_w_ = Tensor<T>(pw_kernel_.weights.shape());
                d_pw_b_ = Tensor<T>(pw_kernel_.bias.shape());
                bn1_ = std::make_unique<BatchNormState<T>>(ci);
                bn2_ = std::make_unique<BatchNormState<T>>(co);
                break;
            case ConvFlavor::pseudo:
                pseudo_pair_ = PseudoKernelPair<T>::he_init(co, ci, k_, seed);
                d_ph_ = Tensor<T>(pseudo_pair_.horizontal.shape());
                d_pv_ = Tensor<T>(pseudo_pair_.vertical.shape());
                bn1_ = std::make_unique<BatchNormState<T>>(ci);
                bn2_ = std::make_unique<BatchNormState<T>>(co);
                break;
        }
        if (bn1_) {
            dgamma1_ = Tensor<T>(bn1_->gamma.shape());
            dbeta1_ = Tensor<T>(bn1_->beta.shape());
        }
        dgamma2_ = Tensor<T>(bn2_->gamma.shape());
        dbeta2_ = Tensor<T>(bn2_->beta.shape());
    }

    void suppress_final_relu() { final_relu_ = false; }

    Tensor<T> forward(const Tensor<T>& x, bool training) override {
        if (training) x_ = x;
        const ConvGeometry same = ConvGeometry::same(k_);
        Tensor<T> h;
        switch (flavor_) {
            case ConvFlavor::standard:
                h = conv3d_forward(x, std_kernel_, same);
                break;
            case ConvFlavor::dw:
                h = depthwise3d_forward(x, dw_kernel_, same);
                h = batchnorm_forward(h, *bn1_, training ? &bn1_cache_ : nullptr);
                h = relu(h);
                if (training) mid_relu_ = h;
                h = pointwise_forward(h, pw_kernel_);
                break;
            case ConvFlavor::pseudo: {
                h = conv3d_general_forward(x, pseudo_pair_.horizontal, horizontal_geom());
                h = batchnorm_forward(h, *bn1_, training ? &bn1_cache_ : nullptr);
                h = relu(h);
                if (training) mid_relu_ = h;
                h = conv3d_general_forward(h, pseudo_pair_.vertical, vertical_geom());
                break;
            }
        }
        h = batchnorm_forward(h, *bn2_, training ? &bn2_cache_ : nullptr);
        if (final_relu_) {
            h = relu(h);
            if (training) y_ = h;
        }
        return h;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        Tensor<T> g = final_relu_ ? relu_backward(dy, y_) : dy;
        auto bn2_grads = batchnorm_backward(g, *bn2_, bn2_cache_);
        dgamma2_ = std::move(bn2_grads.gamma);
        dbeta2_ = std::move(bn2_grads.beta);
        g = std::move(bn2_grads.input);

        const ConvGeometry same = ConvGeometry::same(k_);
        switch (flavor_) {
            case ConvFlavor::standard: {
                auto grads = conv3d_backward(g, x_, std_kernel_, same);
                d_std_ = std::move(grads.weights);
                return std::move(grads.input);
            }
            case ConvFlavor::dw: {
                auto pw_grads = pointwise_backward(g, mid_relu_, pw_kernel_);
                d_pw_w_ = std::move(pw_grads.weights);
                d_pw_b_ = std::move(pw_grads.bias);
                Tensor<T> gm = relu_backward(pw_grads.input, mid_relu_);
                auto bn1_grads = batchnorm_backward(gm, *bn1_, bn1_cache_);
                dgamma1_ = std::move(bn1_grads.gamma);
                dbeta1_ = std::move(bn1_grads.beta);
                auto dw_grads = depthwise3d_backward(bn1_grads.input, x_, dw_kernel_, same);
                d_dw_w_ = std::move(dw_grads.weights);
                d_dw_b_ = std::move(dw_grads.bias);
                return std::move(dw_grads.input);
            }
            case ConvFlavor::pseudo: {
                auto v_grads =
                    conv3d_general_backward(g, mid_relu_, pseudo_pair_.vertical, vertical_geom());
                d_pv_ = std::move(v_grads.weights);
                Tensor<T> gm = relu_backward(v_grads.input, mid_relu_);
                auto bn1_grads = batchnorm_backward(gm, *bn1_, bn1_cache_);
                dgamma1_ = std::move(bn1_grads.gamma);
                dbeta1_ = std::move(bn1_grads.beta);
                auto h_grads = conv3d_general_backward(bn1_grads.input, x_,
                                                       pseudo_pair_.horizontal, horizontal_geom());
                d_ph_ = std::move(h_grads.weights);
                return std::move(h_grads.input);
            }
        }
        throw std::logic_error("unreachable");
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        switch (flavor_) {
            case ConvFlavor::standard:
                out.push_back({this->name_ + ".kernel", &std_kernel_.weights, &d_std_});
                break;
            case ConvFlavor::dw:
                out.push_back({this->name_ + ".dw.weights", &dw_kernel_.weights, &d_dw_w_});
                out.push_back({this->name_ + ".dw.bias", &dw_kernel_.bias, &d_dw_b_});
                out.push_back({this->name_ + ".bn1.gamma", &bn1_->gamma, &dgamma1_});
                out.push_back({this->name_ + ".bn1.beta", &bn1_->beta, &dbeta1_});
                out.push_back({this->name_ + ".pw.weights", &pw_kernel_.weights, &d_pw_w_});
                out.push_back({this->name_ + ".pw.bias", &pw_kernel_.bias, &d_pw_b_});
                break;
            case ConvFlavor::pseudo:
                out.push_back({this->name_ + ".horizontal", &pseudo_pair_.horizontal, &d_ph_});
                out.push_back({this->name_ + ".bn1.gamma", &bn1_->gamma, &dgamma1_});
                out.push_back({this->name_ + ".bn1.beta", &bn1_->beta, &dbeta1_});
                out.push_back({this->name_ + ".vertical", &pseudo_pair_.vertical, &d_pv_});
                break;
        }
        out.push_back({this->name_ + ".bn2.gamma", &bn2_->gamma, &dgamma2_});
        out.push_back({this->name_ + ".bn2.beta", &bn2_->beta, &dbeta2_});
    }

    void set_bn_mode(BnMode mode) override {
        if (bn1_) bn1_->mode = mode;
        bn2_->mode = mode;
    }

private:
    Geometry3 horizontal_geom() const {
        const std::size_t p = k_ / 2;
        return {{1, 0}, {1, p}, {1, p}};
    }
    Geometry3 vertical_geom() const { return {{1, k_ / 2}, {1, 0}, {1, 0}}; }

    ConvFlavor flavor_;
    std::size_t k_;
    bool final_relu_ = true;

    StdKernel<T> std_kernel_;
    DepthwiseKernel<T> dw_kernel_;
    PointwiseKernel<T> pw_kernel_;
    PseudoKernelPair<T> pseudo_pair_;
    Tensor<T> d_std_, d_dw_w_, d_dw_b_, d_pw_w_, d_pw_b_, d_ph_, d_pv_;

    std::unique_ptr<BatchNormState<T>> bn1_;
    std::unique_ptr<BatchNormState<T>> bn2_;
    Tensor<T> dgamma1_, dbeta1_, dgamma2_, dbeta2_;
    BnCache<T> bn1_cache_, bn2_cache_;

    Tensor<T> x_, mid_relu_, y_;
};

// 1x1x1 projection producing logits: bare weights, no bias, no activation.
template <typename T>
class FinalConvLayer final : public Layer<T> {
public:
    FinalConvLayer(const LayerSpec& spec, Seed seed)
        : Layer<T>(spec.name),
          w_(Tensor<T>::randn({spec.c_out, spec.c_in, 1, 1, 1}, seed,
                              std::sqrt(2.0 / static_cast<double>(spec.c_in)))),
          dw_(w_.shape()) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) override {
        if (training) x_ = x;
        return conv3d_general_forward(x, w_, Geometry3{});
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        auto grads = conv3d_general_backward(dy, x_, w_, Geometry3{});
        dw_ = std::move(grads.weights);
        return std::move(grads.input);
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        out.push_back({this->name_ + ".weights", &w_, &dw_});
    }

private:
    Tensor<T> w_, dw_;
    Tensor<T> x_;
};

// y = ReLU(units(x) + x); the wrapped units keep their own batchnorms, the
// last unit's trailing ReLU is suppressed so the skip lands pre-activation.
template <typename T>
class ResidualBlock final : public Layer<T> {
public:
    ResidualBlock(std::string name, std::vector<std::unique_ptr<ConvUnitLayer<T>>> units)
        : Layer<T>(std::move(name)), units_(std::move(units)) {
        if (units_.empty()) throw std::invalid_argument("residual block needs at least one unit");
        units_.back()->suppress_final_relu();
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) override {
        Tensor<T> h = x;
        for (auto& unit : units_) h = unit->forward(h, training);
        if (!h.same_shape(x)) {
            throw std::invalid_argument("residual block '" + this->name_ +
                                        "': skip shape " + shape_str(x.shape()) +
                                        " does not match body output " + shape_str(h.shape()));
        }
        h += x;
        Tensor<T> y = relu(h);
        if (training) y_ = y;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        Tensor<T> g = relu_backward(dy, y_);
        Tensor<T> body = g;
        for (std::size_t i = units_.size(); i-- > 0;) body = units_[i]->backward(body);
        body += g;  // skip path
        return body;
    }

    void collect_params(std::vector<ParamRef<T>>& out) override {
        for (auto& unit : units_) unit->collect_params(out);
    }

    void set_bn_mode(BnMode mode) override {
        for (auto& unit : units_) unit->set_bn_mode(mode);
    }

private:
    std::vector<std::unique_ptr<ConvUnitLayer<T>>> units_;
    Tensor<T> y_;
};

template <typename T>
class Model {
public:
    Model(ModelSpec spec, Seed seed) : spec_(std::move(spec)) {
        std::size_t layer_index = 0;
        for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
            const LayerSpec& layer = spec_.layers[i];
            const Seed layer_seed = subseed(seed, layer_index++);
            switch (layer.kind) {
                case LayerKind::dense:
                    layers_.push_back(std::make_unique<DenseLayer<T>>(layer, layer_seed));
                    break;
                case LayerKind::reshape:
                    layers_.push_back(std::make_unique<ReshapeLayer<T>>(layer));
                    break;
                case LayerKind::flatten:
                    layers_.push_back(std::make_unique<FlattenLayer<T>>(layer));
                    break;
                case LayerKind::max_pool:
                    layers_.push_back(std::make_unique<MaxPoolLayer<T>>(layer));
                    break;
                case LayerKind::conv_transpose:
                    layers_.push_back(std::make_unique<ConvTransposeLayer<T>>(layer, layer_seed));
                    break;
                case LayerKind::final_conv:
                    layers_.push_back(std::make_unique<FinalConvLayer<T>>(layer, layer_seed));
                    break;
                case LayerKind::conv_unit: {
                    if (layer.residual_group < 0) {
                        layers_.push_back(
                            std::make_unique<ConvUnitLayer<T>>(layer, spec_.flavor, layer_seed));
                        break;
                    }
                    // Swallow the whole group into one residual wrapper.
                    std::vector<std::unique_ptr<ConvUnitLayer<T>>> units;
                    const int group = layer.residual_group;
                    std::size_t j = i;
                    while (j < spec_.layers.size() &&
                           spec_.layers[j].kind == LayerKind::conv_unit &&
                           spec_.layers[j].residual_group == group) {
                        const Seed unit_seed = j == i ? layer_seed : subseed(seed, layer_index++);
                        units.push_back(std::make_unique<ConvUnitLayer<T>>(spec_.layers[j],
                                                                           spec_.flavor,
                                                                           unit_seed));
                        ++j;
                    }
                    layers_.push_back(std::make_unique<ResidualBlock<T>>(
                        "resblock" + std::to_string(group), std::move(units)));
                    i = j - 1;
                    break;
                }
            }
        }
    }

    const ModelSpec& spec() const { return spec_; }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        for (auto& layer : layers_) layer->set_bn_mode(training ? BnMode::training
                                                                : BnMode::inference);
        Tensor<T> h = x;
        for (auto& layer : layers_) h = layer->forward(h, training);
        return h;
    }

    // Gradient of the loss with respect to the model input; parameter
    // gradients are left in the layers (one backward per forward).
    Tensor<T> backward(const Tensor<T>& dloss) {
        Tensor<T> g = dloss;
        for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
        return g;
    }

    std::vector<ParamRef<T>> params() {
        std::vector<ParamRef<T>> out;
        for (auto& layer : layers_) layer->collect_params(out);
        return out;
    }

    std::uint64_t param_count() {
        std::uint64_t n = 0;
        for (const auto& p : params()) n += p.value->size();
        return n;
    }

private:
    ModelSpec spec_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
};

template <typename T>
Model<T> build_runtime(const ModelSpec& spec, Seed seed) {
    return Model<T>(spec, seed);
}

}  // namespace volt3d
