#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "editshield/autodiff.hpp"
#include "editshield/image.hpp"
#include "editshield/schedule.hpp"
#include "editshield/tensor.hpp"

namespace editshield {

// Latent-space buffer, [C,H,W].
struct LatentBuffer {
    Tensor values;

    LatentBuffer() = default;
    explicit LatentBuffer(Tensor t) : values(std::move(t)) {
        require(values.ndim() == 3, ErrorKind::invalid_input, "latent must be [C,H,W]");
    }

    std::vector<int> shape() const { return values.shape; }

    Tensor as_nchw() const {
        Tensor t = values;
        t.shape = {1, values.dim(0), values.dim(1), values.dim(2)};
        return t;
    }

    static LatentBuffer from_nchw(const Tensor& t) {
        require(t.ndim() == 4 && t.dim(0) == 1, ErrorKind::invalid_input, "expected [1,C,H,W]");
        Tensor out = t;
        out.shape = {t.dim(1), t.dim(2), t.dim(3)};
        return LatentBuffer(std::move(out));
    }
};

enum class TokenFlag { begin, end, pad, content };

struct TextEmbedding {
    Tensor matrix;                 // [n_k, d]
    std::vector<int> token_ids;    // length n_k
    std::vector<TokenFlag> flags;  // length n_k
    bool truncated = false;

    int token_count() const { return matrix.ndim() == 2 ? matrix.dim(0) : 0; }
    int width() const { return matrix.ndim() == 2 ? matrix.dim(1) : 0; }

    void validate() const {
        require(matrix.ndim() == 2, ErrorKind::invalid_input, "text embedding must be a matrix");
        require(static_cast<int>(token_ids.size()) == matrix.dim(0) &&
                    static_cast<int>(flags.size()) == matrix.dim(0),
                ErrorKind::invalid_input, "token metadata length mismatch");
    }
};

// Per-layer post-softmax cross-attention maps, each [heads, n_q, n_k].
struct AttentionMapSet {
    int timestep = 0;
    std::map<std::string, Tensor> maps;
    std::map<std::string, int> resolution;

    void validate(double tol = 1e-5) const {
        for (const auto& [id, m] : maps) {
            require(m.ndim() == 3, ErrorKind::invalid_input, "attention map must be [h,nq,nk]");
            const auto it = resolution.find(id);
            require(it != resolution.end(), ErrorKind::invalid_input, "missing resolution tag for " + id);
            require(m.dim(1) == it->second * it->second, ErrorKind::invalid_input,
                    "n_q must equal resolution^2 for layer " + id);
            const int rows = m.dim(0) * m.dim(1), nk = m.dim(2);
            for (int r = 0; r < rows; ++r) {
                double s = 0.0;
                for (int c = 0; c < nk; ++c) {
                    const float x = m.v[static_cast<size_t>(r) * nk + c];
                    require(x >= 0.0f && x <= 1.0f, ErrorKind::invalid_input,
                            "attention weight outside [0,1]");
                    s += x;
                }
                require(std::fabs(s - 1.0) <= tol, ErrorKind::invalid_input,
                        "attention row does not sum to 1 in layer " + id);
            }
        }
    }
};

struct AttentionLayerInfo {
    std::string id;
    int resolution = 0;  // spatial tag; n_q == resolution^2
};

struct BackendInfo {
    std::string kind;
    std::vector<int> latent_shape;  // [C,H,W]
    int input_height = 0;
    int input_width = 0;
    DiffusionSchedule schedule;
    std::vector<AttentionLayerInfo> attention_catalog;
    uint64_t seed = 0;
    bool deterministic = true;
    double roundtrip_psnr_floor = 0.0;

    std::set<int> catalog_resolutions() const {
        std::set<int> out;
        for (const auto& l : attention_catalog) out.insert(l.resolution);
        return out;
    }

    void validate() const {
        require(!attention_catalog.empty(), ErrorKind::invalid_input, "attention catalog empty");
        require(latent_shape.size() == 3, ErrorKind::invalid_input, "latent shape must be [C,H,W]");
        schedule.validate();
    }
};

struct PosteriorStats {
    LatentBuffer mean;
    LatentBuffer log_var;
};

// Model abstraction consumed by the attacks, editors and metrics. The
// build_* methods append the corresponding computation to a caller-owned
// graph so that gradients with respect to the supplied vars are available;
// the value-level wrappers below run them on a throwaway non-recording graph.
class Backend {
public:
    virtual ~Backend() = default;

    virtual const BackendInfo& info() const = 0;
    virtual TextEmbedding embed_text(const std::string& text) const = 0;

    virtual ad::Var build_encode(ad::Graph& g, ad::Var image_nchw) const = 0;
    virtual std::pair<ad::Var, ad::Var> build_posterior(ad::Graph& g, ad::Var image_nchw) const = 0;
    virtual ad::Var build_decode(ad::Graph& g, ad::Var latent_nchw) const = 0;

    struct UnetBuild {
        ad::Var noise;  // [1,C,H,W]
        std::vector<std::pair<std::string, ad::Var>> attention;  // layer id -> [1,h,nq,nk]
    };
    virtual UnetBuild build_unet(ad::Graph& g, ad::Var x_t, int t, const TextEmbedding& text) const = 0;

    // ----- value-level operations -----

    LatentBuffer encode(const ImageBuffer& image) const {
        check_input_image(image);
        ad::Graph g(false);
        ad::Var img = g.constant(image_to_nchw(image));
        ad::Var z = build_encode(g, img);
        return LatentBuffer::from_nchw(g.val(z));
    }

    PosteriorStats encode_posterior(const ImageBuffer& image) const {
        check_input_image(image);
        ad::Graph g(false);
        ad::Var img = g.constant(image_to_nchw(image));
        auto [mu, logvar] = build_posterior(g, img);
        return {LatentBuffer::from_nchw(g.val(mu)), LatentBuffer::from_nchw(g.val(logvar))};
    }

    ImageBuffer decode(const LatentBuffer& latent) const {
        check_latent(latent);
        ad::Graph g(false);
        ad::Var z = g.constant(latent.as_nchw());
        ad::Var img = build_decode(g, z);
        return nchw_to_image(g.val(img));
    }

    std::pair<LatentBuffer, AttentionMapSet> predict_noise_with_attention(
        const LatentBuffer& x_t, int t, const TextEmbedding& text, const std::set<int>& layers) const {
        check_latent(x_t);
        check_layer_selection(layers);
        require(t >= 0 && t <= info().schedule.t_max, ErrorKind::invalid_input, "timestep out of range");
        ad::Graph g(false);
        ad::Var z = g.constant(x_t.as_nchw());
        UnetBuild out = build_unet(g, z, t, text);
        AttentionMapSet set = collect_attention(g, out, t, layers);
        return {LatentBuffer::from_nchw(g.val(out.noise)), std::move(set)};
    }

    // Shared helper for graph-level callers: filter built attention layers by
    // resolution tag and strip the batch dim from each map.
    AttentionMapSet collect_attention(ad::Graph& g, const UnetBuild& built, int t,
                                      const std::set<int>& layers) const {
        AttentionMapSet set;
        set.timestep = t;
        for (const auto& layer : info().attention_catalog) {
            if (!layers.count(layer.resolution)) continue;
            for (const auto& [id, var] : built.attention) {
                if (id != layer.id) continue;
                const Tensor& m = g.val(var);
                Tensor map = m;
                map.shape = {m.dim(1), m.dim(2), m.dim(3)};
                set.maps[id] = std::move(map);
                set.resolution[id] = layer.resolution;
            }
        }
        return set;
    }

    void check_input_image(const ImageBuffer& image) const {
        image.validate();
        require(image.height == info().input_height && image.width == info().input_width,
                ErrorKind::invalid_input,
                "image size " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    " does not match backend input " + std::to_string(info().input_height) + "x" +
                    std::to_string(info().input_width));
    }

    void check_latent(const LatentBuffer& latent) const {
        require(latent.shape() == info().latent_shape, ErrorKind::invalid_input,
                "latent shape " + shape_string(latent.shape()) + " does not match backend contract " +
                    shape_string(info().latent_shape));
        require(latent.values.all_finite(), ErrorKind::invalid_input, "latent has non-finite values");
    }

    void check_layer_selection(const std::set<int>& layers) const {
        require(!layers.empty(), ErrorKind::invalid_input, "layer selection empty");
        const std::set<int> have = info().catalog_resolutions();
        for (int r : layers)
            require(have.count(r), ErrorKind::invalid_input,
                    "unknown attention resolution tag " + std::to_string(r));
    }
};

// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise
inline LatentBuffer forward_diffuse(const LatentBuffer& x0, int t, const LatentBuffer& noise,
                                    const DiffusionSchedule& schedule) {
    require(t >= 0 && t <= schedule.t_max, ErrorKind::invalid_input, "timestep out of range");
    require(x0.values.same_shape(noise.values), ErrorKind::invalid_input,
            "noise shape does not match latent");
    const float a = static_cast<float>(schedule.sqrt_alpha_bar(t));
    const float b = static_cast<float>(schedule.sqrt_one_minus_alpha_bar(t));
    Tensor out(x0.values.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] = a * x0.values.v[i] + b * noise.values.v[i];
    return LatentBuffer(std::move(out));
}

// Graph version used inside attack iterations.
inline ad::Var forward_diffuse_node(ad::Graph& g, ad::Var x0, int t, ad::Var noise,
                                    const DiffusionSchedule& schedule) {
    require(t >= 0 && t <= schedule.t_max, ErrorKind::invalid_input, "timestep out of range");
    return g.add(g.scale(x0, static_cast<float>(schedule.sqrt_alpha_bar(t))),
                 g.scale(noise, static_cast<float>(schedule.sqrt_one_minus_alpha_bar(t))));
}

}  // namespace editshield
