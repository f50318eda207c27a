#include "vstp/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "vstp/prompting.hpp"
#include "vstp/rng.hpp"

namespace vstp {

using Eigen::MatrixXd;

void validate_model_config(const ModelConfig& cfg) {
  if (cfg.d < 2 || cfg.heads < 1 || cfg.d % cfg.heads != 0) {
    throw std::invalid_argument("model config: d must be divisible by heads");
  }
  if (cfg.layers < 1 || cfg.encoder_layers < 1 || cfg.mlp_factor < 1) {
    throw std::invalid_argument("model config: layer counts must be positive");
  }
  if (cfg.max_structured < 3 || cfg.max_region < 3 || cfg.max_content < 3) {
    throw std::invalid_argument("model config: max lengths must be >= 3");
  }
  if (cfg.grid_size < 1 || cfg.patch < 1 || cfg.grid_size % cfg.patch != 0) {
    throw std::invalid_argument("model config: grid_size must be a multiple of patch");
  }
  if (cfg.grid_channels < 1) {
    throw std::invalid_argument("model config: grid_channels must be positive");
  }
  if (cfg.n_bins < 2) {
    throw std::invalid_argument("model config: n_bins must be >= 2");
  }
  if (cfg.batch < 1) {
    throw std::invalid_argument("model config: batch must be >= 1");
  }
  if (cfg.steps < 0 || cfg.warmup < 0 || cfg.lr <= 0.0 || cfg.beta1 < 0.0 ||
      cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0 ||
      cfg.adam_eps <= 0.0) {
    throw std::invalid_argument("model config: bad training schedule");
  }
}

// --- parameter layout --------------------------------------------------------

namespace {

struct Norm {
  MatrixXd g, b;  // 1 x d
};
struct Linear {
  MatrixXd w;  // in x out
  MatrixXd b;  // 1 x out
};
struct Attn {
  Norm ln;
  Linear q, k, v, o;
};
struct Mlp {
  Norm ln;
  Linear fc1, fc2;
};
struct DecLayer {
  Attn self;
  Attn cross;
  Mlp mlp;
};
struct EncLayer {
  Attn self;
  Mlp mlp;
};
struct DecoderParams {
  MatrixXd embed;  // V x d
  MatrixXd pos;    // max_len x d
  std::vector<DecLayer> layers;
  Norm ln_f;
  Linear out;  // d x V
};

}  // namespace

struct ModelParams {
  Linear patch;     // (patch^2 * C) x d
  MatrixXd enc_pos;  // n x d
  std::vector<EncLayer> enc_layers;
  Norm enc_ln_f;
  std::array<DecoderParams, 3> dec;
};

namespace {

template <class Params, class F>
void visit_params(Params& p, F&& f) {
  auto norm = [&](const std::string& n, auto& x) {
    f(n + ".g", x.g);
    f(n + ".b", x.b);
  };
  auto lin = [&](const std::string& n, auto& x) {
    f(n + ".w", x.w);
    f(n + ".b", x.b);
  };
  auto attn = [&](const std::string& n, auto& a) {
    norm(n + ".ln", a.ln);
    lin(n + ".q", a.q);
    lin(n + ".k", a.k);
    lin(n + ".v", a.v);
    lin(n + ".o", a.o);
  };
  auto mlp = [&](const std::string& n, auto& m) {
    norm(n + ".ln", m.ln);
    lin(n + ".fc1", m.fc1);
    lin(n + ".fc2", m.fc2);
  };

  lin("enc.patch", p.patch);
  f("enc.pos", p.enc_pos);
  for (std::size_t i = 0; i < p.enc_layers.size(); ++i) {
    const std::string base = "enc.l" + std::to_string(i);
    attn(base + ".self", p.enc_layers[i].self);
    mlp(base + ".mlp", p.enc_layers[i].mlp);
  }
  norm("enc.ln_f", p.enc_ln_f);
  for (std::size_t d = 0; d < p.dec.size(); ++d) {
    const std::string pre = "dec" + std::to_string(d);
    f(pre + ".embed", p.dec[d].embed);
    f(pre + ".pos", p.dec[d].pos);
    for (std::size_t i = 0; i < p.dec[d].layers.size(); ++i) {
      const std::string base = pre + ".l" + std::to_string(i);
      attn(base + ".self", p.dec[d].layers[i].self);
      attn(base + ".cross", p.dec[d].layers[i].cross);
      mlp(base + ".mlp", p.dec[d].layers[i].mlp);
    }
    norm(pre + ".ln_f", p.dec[d].ln_f);
    lin(pre + ".out", p.dec[d].out);
  }
}

Norm make_norm(int d) { return {MatrixXd::Ones(1, d), MatrixXd::Zero(1, d)}; }
Linear make_linear(int in, int out) {
  return {MatrixXd::Zero(in, out), MatrixXd::Zero(1, out)};
}
Attn make_attn(int d) {
  return {make_norm(d), make_linear(d, d), make_linear(d, d),
          make_linear(d, d), make_linear(d, d)};
}
Mlp make_mlp(int d, int factor) {
  return {make_norm(d), make_linear(d, d * factor), make_linear(d * factor, d)};
}

std::unique_ptr<ModelParams> make_params(const ModelConfig& cfg, int vocab_size) {
  auto p = std::make_unique<ModelParams>();
  const int side = cfg.grid_size / cfg.patch;
  const int n_tokens = side * side;
  p->patch = make_linear(cfg.patch * cfg.patch * cfg.grid_channels, cfg.d);
  p->enc_pos = MatrixXd::Zero(n_tokens, cfg.d);
  for (int i = 0; i < cfg.encoder_layers; ++i) {
    p->enc_layers.push_back({make_attn(cfg.d), make_mlp(cfg.d, cfg.mlp_factor)});
  }
  p->enc_ln_f = make_norm(cfg.d);
  const int max_len[3] = {cfg.max_structured, cfg.max_region, cfg.max_content};
  for (int d = 0; d < 3; ++d) {
    DecoderParams& dec = p->dec[static_cast<std::size_t>(d)];
    dec.embed = MatrixXd::Zero(vocab_size, cfg.d);
    dec.pos = MatrixXd::Zero(max_len[d], cfg.d);
    for (int i = 0; i < cfg.layers; ++i) {
      dec.layers.push_back({make_attn(cfg.d), make_attn(cfg.d),
                            make_mlp(cfg.d, cfg.mlp_factor)});
    }
    dec.ln_f = make_norm(cfg.d);
    dec.out = make_linear(cfg.d, vocab_size);
  }
  return p;
}

void init_params(ModelParams& p, std::uint64_t seed, double scale) {
  Rng rng(seed ^ 0x90DE1A11ull);
  visit_params(p, [&](const std::string& name, MatrixXd& t) {
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0) {
      t.setOnes();  // layernorm gain
    } else if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0) {
      t.setZero();  // biases and layernorm shift
    } else {
      for (Eigen::Index r = 0; r < t.rows(); ++r) {
        for (Eigen::Index c = 0; c < t.cols(); ++c) {
          t(r, c) = rng.normal(0.0, scale);
        }
      }
    }
  });
}

std::unique_ptr<ModelParams> zeros_like(const ModelParams& src) {
  auto g = std::make_unique<ModelParams>(src);
  visit_params(*g, [](const std::string&, MatrixXd& t) { t.setZero(); });
  return g;
}

// --- forward / backward blocks ------------------------------------------------

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

struct NormCache {
  MatrixXd xhat;
  Eigen::VectorXd inv_std;
};

MatrixXd norm_fwd(const Norm& n, const MatrixXd& x, NormCache& c) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  c.xhat.resize(rows, d);
  c.inv_std.resize(rows);
  MatrixXd out(rows, d);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double mu = x.row(i).mean();
    Eigen::RowVectorXd cen = x.row(i).array() - mu;
    const double var = cen.squaredNorm() / static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLnEps);
    c.inv_std(i) = is;
    c.xhat.row(i) = cen * is;
    out.row(i) =
        (c.xhat.row(i).array() * n.g.row(0).array()) + n.b.row(0).array();
  }
  return out;
}

MatrixXd norm_bwd(const Norm& n, const NormCache& c, const MatrixXd& dy,
                  Norm& grad) {
  grad.g.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  grad.b.row(0) += dy.colwise().sum();
  MatrixXd dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    Eigen::RowVectorXd dxhat = dy.row(i).array() * n.g.row(0).array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat.array() * c.xhat.row(i).array()).mean();
    dx.row(i) =
        ((dxhat.array() - m1) - c.xhat.row(i).array() * m2) * c.inv_std(i);
  }
  return dx;
}

MatrixXd lin_fwd(const Linear& l, const MatrixXd& x) {
  MatrixXd y = x * l.w;
  y.rowwise() += l.b.row(0);
  return y;
}

MatrixXd lin_bwd(const Linear& l, const MatrixXd& x, const MatrixXd& dy,
                 Linear& grad) {
  grad.w.noalias() += x.transpose() * dy;
  grad.b.row(0) += dy.colwise().sum();
  return dy * l.w.transpose();
}

MatrixXd gelu_fwd(const MatrixXd& x) {
  return x.unaryExpr([](double v) {
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    return 0.5 * v * (1.0 + t);
  });
}

MatrixXd gelu_bwd(const MatrixXd& x, const MatrixXd& dy) {
  MatrixXd dgelu = x.unaryExpr([](double v) {
    const double u = kGeluC * (v + kGeluA * v * v * v);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
  });
  return dy.cwiseProduct(dgelu);
}

// Pre-LN residual attention: out = x + O(softmax(QK^T/sqrt(dk)) V).  Queries
// come from LN(x); keys/values from LN(x) too (self) or from `src` as-is
// (cross, where src is the encoder output).
struct AttnCache {
  NormCache ln;
  MatrixXd xn;   // LN(x)
  MatrixXd kv;   // key/value input actually used
  MatrixXd q, k, v;
  std::vector<MatrixXd> att;  // per head, N x M
  MatrixXd ctx;
};

MatrixXd attn_fwd(const Attn& a, const MatrixXd& x, const MatrixXd* src,
                  bool causal, int heads, AttnCache& c) {
  c.xn = norm_fwd(a.ln, x, c.ln);
  c.kv = src ? *src : c.xn;
  c.q = lin_fwd(a.q, c.xn);
  c.k = lin_fwd(a.k, c.kv);
  c.v = lin_fwd(a.v, c.kv);
  const Eigen::Index n = x.rows(), m = c.kv.rows(), d = x.cols();
  const Eigen::Index dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  c.att.assign(static_cast<std::size_t>(heads), MatrixXd());
  c.ctx.resize(n, d);
  for (int h = 0; h < heads; ++h) {
    auto qh = c.q.middleCols(h * dk, dk);
    auto kh = c.k.middleCols(h * dk, dk);
    auto vh = c.v.middleCols(h * dk, dk);
    MatrixXd s = qh * kh.transpose() * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < m; ++j) {
          s(i, j) = -std::numeric_limits<double>::infinity();
        }
      }
    }
    MatrixXd& att = c.att[static_cast<std::size_t>(h)];
    att.resize(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = s.row(i).maxCoeff();
      Eigen::RowVectorXd e = (s.row(i).array() - mx).exp();
      att.row(i) = e / e.sum();
    }
    c.ctx.middleCols(h * dk, dk).noalias() = att * vh;
  }
  return x + lin_fwd(a.o, c.ctx);
}

// Returns dx; when the block is cross-attention, accumulates the key/value
// path into *dsrc instead of dx.
MatrixXd attn_bwd(const Attn& a, const AttnCache& c, const MatrixXd& dy,
                  int heads, Attn& grad, MatrixXd* dsrc) {
  const Eigen::Index n = dy.rows(), d = dy.cols(), m = c.kv.rows();
  const Eigen::Index dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  MatrixXd dctx = lin_bwd(a.o, c.ctx, dy, grad.o);
  MatrixXd dq = MatrixXd::Zero(n, d);
  MatrixXd dkm = MatrixXd::Zero(m, d);
  MatrixXd dvm = MatrixXd::Zero(m, d);
  for (int h = 0; h < heads; ++h) {
    const MatrixXd& att = c.att[static_cast<std::size_t>(h)];
    auto dctx_h = dctx.middleCols(h * dk, dk);
    auto vh = c.v.middleCols(h * dk, dk);
    MatrixXd datt = dctx_h * vh.transpose();  // n x m
    dvm.middleCols(h * dk, dk).noalias() += att.transpose() * dctx_h;
    Eigen::VectorXd rowdot = (datt.array() * att.array()).rowwise().sum();
    MatrixXd ds =
        (att.array() * (datt.array().colwise() - rowdot.array())).matrix() *
        scale;
    dq.middleCols(h * dk, dk).noalias() += ds * c.k.middleCols(h * dk, dk);
    dkm.middleCols(h * dk, dk).noalias() +=
        ds.transpose() * c.q.middleCols(h * dk, dk);
  }
  MatrixXd dxn = lin_bwd(a.q, c.xn, dq, grad.q);
  MatrixXd dkv = lin_bwd(a.k, c.kv, dkm, grad.k);
  dkv += lin_bwd(a.v, c.kv, dvm, grad.v);
  if (dsrc) {
    *dsrc += dkv;
  } else {
    dxn += dkv;
  }
  return dy + norm_bwd(a.ln, c.ln, dxn, grad.ln);
}

struct MlpCache {
  NormCache ln;
  MatrixXd xn, h, hg;
};

MatrixXd mlp_fwd(const Mlp& m, const MatrixXd& x, MlpCache& c) {
  c.xn = norm_fwd(m.ln, x, c.ln);
  c.h = lin_fwd(m.fc1, c.xn);
  c.hg = gelu_fwd(c.h);
  return x + lin_fwd(m.fc2, c.hg);
}

MatrixXd mlp_bwd(const Mlp& m, const MlpCache& c, const MatrixXd& dy,
                 Mlp& grad) {
  MatrixXd dhg = lin_bwd(m.fc2, c.hg, dy, grad.fc2);
  MatrixXd dh = gelu_bwd(c.h, dhg);
  MatrixXd dxn = lin_bwd(m.fc1, c.xn, dh, grad.fc1);
  return dy + norm_bwd(m.ln, c.ln, dxn, grad.ln);
}

// --- encoder -------------------------------------------------------------------

MatrixXd patchify(const ImageGrid& img, int patch) {
  const int side = img.height / patch;
  MatrixXd m(side * side, patch * patch * img.channels);
  for (int py = 0; py < side; ++py) {
    for (int px = 0; px < side; ++px) {
      Eigen::Index col = 0;
      const Eigen::Index row = static_cast<Eigen::Index>(py) * side + px;
      for (int dy = 0; dy < patch; ++dy) {
        for (int dx = 0; dx < patch; ++dx) {
          for (int ch = 0; ch < img.channels; ++ch) {
            m(row, col++) = static_cast<double>(
                img.at(py * patch + dy, px * patch + dx, ch));
          }
        }
      }
    }
  }
  return m;
}

struct EncCache {
  MatrixXd patches;
  std::vector<AttnCache> att;
  std::vector<MlpCache> mlp;
  NormCache ln_f;
};

MatrixXd encoder_fwd(const ModelParams& p, const MatrixXd& patches, int heads,
                     EncCache& c) {
  c.patches = patches;
  MatrixXd x = lin_fwd(p.patch, patches) + p.enc_pos;
  c.att.resize(p.enc_layers.size());
  c.mlp.resize(p.enc_layers.size());
  for (std::size_t i = 0; i < p.enc_layers.size(); ++i) {
    x = attn_fwd(p.enc_layers[i].self, x, nullptr, /*causal=*/false, heads,
                 c.att[i]);
    x = mlp_fwd(p.enc_layers[i].mlp, x, c.mlp[i]);
  }
  return norm_fwd(p.enc_ln_f, x, c.ln_f);
}

void encoder_bwd(const ModelParams& p, const EncCache& c, const MatrixXd& dout,
                 int heads, ModelParams& grad) {
  MatrixXd dx = norm_bwd(p.enc_ln_f, c.ln_f, dout, grad.enc_ln_f);
  for (std::size_t i = p.enc_layers.size(); i-- > 0;) {
    dx = mlp_bwd(p.enc_layers[i].mlp, c.mlp[i], dx, grad.enc_layers[i].mlp);
    dx = attn_bwd(p.enc_layers[i].self, c.att[i], dx, heads,
                  grad.enc_layers[i].self, nullptr);
  }
  grad.enc_pos += dx;
  lin_bwd(p.patch, c.patches, dx, grad.patch);
}

// --- decoder -------------------------------------------------------------------

struct DecCache {
  std::vector<int> inputs;
  std::vector<AttnCache> self_c, cross_c;
  std::vector<MlpCache> mlp_c;
  NormCache ln_f;
  MatrixXd yn;
};

MatrixXd decoder_fwd(const DecoderParams& dec, std::span<const int> inputs,
                     const MatrixXd& mem, int heads, DecCache& c) {
  const Eigen::Index n = static_cast<Eigen::Index>(inputs.size());
  if (n == 0) throw std::invalid_argument("decoder: empty input");
  if (n > dec.pos.rows()) {
    throw std::invalid_argument("decoder: sequence of " + std::to_string(n) +
                                " tokens exceeds the positional table (" +
                                std::to_string(dec.pos.rows()) + ")");
  }
  c.inputs.assign(inputs.begin(), inputs.end());
  MatrixXd x(n, dec.embed.cols());
  for (Eigen::Index j = 0; j < n; ++j) {
    const int id = inputs[static_cast<std::size_t>(j)];
    if (id < 0 || id >= dec.embed.rows()) {
      throw std::out_of_range("decoder: token id " + std::to_string(id));
    }
    x.row(j) = dec.embed.row(id) + dec.pos.row(j);
  }
  c.self_c.resize(dec.layers.size());
  c.cross_c.resize(dec.layers.size());
  c.mlp_c.resize(dec.layers.size());
  for (std::size_t i = 0; i < dec.layers.size(); ++i) {
    x = attn_fwd(dec.layers[i].self, x, nullptr, /*causal=*/true, heads,
                 c.self_c[i]);
    x = attn_fwd(dec.layers[i].cross, x, &mem, /*causal=*/false, heads,
                 c.cross_c[i]);
    x = mlp_fwd(dec.layers[i].mlp, x, c.mlp_c[i]);
  }
  c.yn = norm_fwd(dec.ln_f, x, c.ln_f);
  return lin_fwd(dec.out, c.yn);
}

void decoder_bwd(const DecoderParams& dec, const DecCache& c,
                 const MatrixXd& dlogits, int heads, DecoderParams& grad,
                 MatrixXd& dmem) {
  MatrixXd dyn = lin_bwd(dec.out, c.yn, dlogits, grad.out);
  MatrixXd dx = norm_bwd(dec.ln_f, c.ln_f, dyn, grad.ln_f);
  for (std::size_t i = dec.layers.size(); i-- > 0;) {
    dx = mlp_bwd(dec.layers[i].mlp, c.mlp_c[i], dx, grad.layers[i].mlp);
    dx = attn_bwd(dec.layers[i].cross, c.cross_c[i], dx, heads,
                  grad.layers[i].cross, &dmem);
    dx = attn_bwd(dec.layers[i].self, c.self_c[i], dx, heads,
                  grad.layers[i].self, nullptr);
  }
  for (Eigen::Index j = 0; j < dx.rows(); ++j) {
    grad.embed.row(c.inputs[static_cast<std::size_t>(j)]) += dx.row(j);
    grad.pos.row(j) += dx.row(j);
  }
}

double row_logsumexp(const Eigen::RowVectorXd& row) {
  const double mx = row.maxCoeff();
  return mx + std::log((row.array() - mx).exp().sum());
}

// Loss plus (optionally) dL/dlogits for the counted positions.
double wnll_impl(const MatrixXd& logits, const TrainingTarget& t,
                 MatrixXd* dlogits) {
  const std::size_t n = t.targets.size();
  if (t.inputs.size() != n || t.weights.size() != n) {
    throw std::invalid_argument("weighted_nll_loss: ragged training target");
  }
  if (static_cast<std::size_t>(logits.rows()) != n) {
    throw std::invalid_argument(
        "weighted_nll_loss: logits rows != target length");
  }
  if (dlogits) *dlogits = MatrixXd::Zero(logits.rows(), logits.cols());
  double loss = 0.0;
  for (std::size_t j = std::max(t.k, 0); j < n; ++j) {
    const double w = t.weights[j];
    if (w == 0.0) continue;  // <PAD>
    const int target = t.targets[j];
    if (target < 0 || target >= logits.cols()) {
      throw std::out_of_range("weighted_nll_loss: target id " +
                              std::to_string(target));
    }
    const Eigen::RowVectorXd row = logits.row(static_cast<Eigen::Index>(j));
    if (!row.allFinite()) {
      throw std::runtime_error("weighted_nll_loss: non-finite logits at position " +
                               std::to_string(j));
    }
    const double lse = row_logsumexp(row);
    loss += w * (lse - row(target));
    if (dlogits) {
      Eigen::RowVectorXd p = (row.array() - lse).exp();
      p(target) -= 1.0;
      dlogits->row(static_cast<Eigen::Index>(j)) = w * p;
    }
  }
  return loss;
}

double total_weight(const TrainingTarget& t) {
  double w = 0.0;
  for (std::size_t j = std::max(t.k, 0); j < t.weights.size(); ++j) {
    w += t.weights[j];
  }
  return w;
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"d", cfg.d},
                        {"layers", cfg.layers},
                        {"heads", cfg.heads},
                        {"mlp_factor", cfg.mlp_factor},
                        {"encoder_layers", cfg.encoder_layers},
                        {"grid_size", cfg.grid_size},
                        {"grid_channels", cfg.grid_channels},
                        {"patch", cfg.patch},
                        {"max_structured", cfg.max_structured},
                        {"max_region", cfg.max_region},
                        {"max_content", cfg.max_content},
                        {"n_bins", cfg.n_bins},
                        {"task", to_string(cfg.task)},
                        {"classes", cfg.schema.classes},
                        {"max_span", cfg.schema.max_span},
                        {"seed", cfg.seed},
                        {"init_scale", cfg.init_scale},
                        {"steps", cfg.steps},
                        {"warmup", cfg.warmup},
                        {"batch", cfg.batch},
                        {"lr", cfg.lr},
                        {"beta1", cfg.beta1},
                        {"beta2", cfg.beta2},
                        {"adam_eps", cfg.adam_eps},
                        {"clip_norm", cfg.clip_norm}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.d = j.at("d").get<int>();
  cfg.layers = j.at("layers").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.mlp_factor = j.at("mlp_factor").get<int>();
  cfg.encoder_layers = j.at("encoder_layers").get<int>();
  cfg.grid_size = j.at("grid_size").get<int>();
  cfg.grid_channels = j.at("grid_channels").get<int>();
  cfg.patch = j.at("patch").get<int>();
  cfg.max_structured = j.at("max_structured").get<int>();
  cfg.max_region = j.at("max_region").get<int>();
  cfg.max_content = j.at("max_content").get<int>();
  cfg.n_bins = j.at("n_bins").get<int>();
  cfg.task = task_from_string(j.at("task").get<std::string>());
  cfg.schema.classes = j.at("classes").get<std::vector<std::string>>();
  cfg.schema.max_span = j.at("max_span").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.init_scale = j.at("init_scale").get<double>();
  cfg.steps = j.at("steps").get<int>();
  cfg.warmup = j.at("warmup").get<int>();
  cfg.batch = j.at("batch").get<int>();
  cfg.lr = j.at("lr").get<double>();
  cfg.beta1 = j.at("beta1").get<double>();
  cfg.beta2 = j.at("beta2").get<double>();
  cfg.adam_eps = j.at("adam_eps").get<double>();
  cfg.clip_norm = j.at("clip_norm").get<double>();
  return cfg;
}

}  // namespace

// --- public config serialization ------------------------------------------------

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return config_to_json(cfg);
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  return config_from_json(j);
}

// --- public loss --------------------------------------------------------------

double weighted_nll_loss(const Eigen::MatrixXd& logits,
                         const TrainingTarget& target) {
  return wnll_impl(logits, target, nullptr);
}

// --- model ---------------------------------------------------------------------

Model::Model(const ModelConfig& cfg)
    : cfg_(cfg),
      vocab_(Vocabulary::build(cfg.n_bins, cfg.task, cfg.schema)) {
  validate_model_config(cfg_);
  params_ = make_params(cfg_, vocab_.size());
  init_params(*params_, cfg_.seed, cfg_.init_scale);
  grads_ = zeros_like(*params_);
  moment1_ = zeros_like(*params_);
  moment2_ = zeros_like(*params_);
}

Model::~Model() = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;

VisualEmbeddings Model::encode(const ImageGrid& img) const {
  if (img.height != cfg_.grid_size || img.width != cfg_.grid_size ||
      img.channels != cfg_.grid_channels) {
    throw std::invalid_argument(
        "encode: grid is " + std::to_string(img.height) + "x" +
        std::to_string(img.width) + "x" + std::to_string(img.channels) +
        ", config wants " + std::to_string(cfg_.grid_size) + "x" +
        std::to_string(cfg_.grid_size) + "x" +
        std::to_string(cfg_.grid_channels));
  }
  EncCache cache;
  MatrixXd v = encoder_fwd(*params_, patchify(img, cfg_.patch), cfg_.heads, cache);
  if (!v.allFinite()) {
    throw std::runtime_error("encode: non-finite embeddings");
  }
  return {std::move(v)};
}

Eigen::MatrixXd Model::decoder_logits(DecoderId dec, std::span<const int> inputs,
                                      const VisualEmbeddings& v) const {
  DecCache cache;
  return decoder_fwd(params_->dec[static_cast<std::size_t>(dec)], inputs, v.v,
                     cfg_.heads, cache);
}

// --- greedy decoding with a KV cache -------------------------------------------

namespace {

struct LayerKv {
  MatrixXd k, v;        // growing self-attention cache, rows 0..len-1
  Eigen::Index len = 0;
  MatrixXd ck, cv;      // fixed cross-attention keys/values
};

// One position through one decoder; x is 1 x d.
MatrixXd step_layer(const DecLayer& layer, MatrixXd x, LayerKv& kv, int heads) {
  NormCache nc;
  const Eigen::Index d = x.cols();
  const Eigen::Index dk = d / heads;
  // causal self-attention against the cache (the new row included)
  MatrixXd xn = norm_fwd(layer.self.ln, x, nc);
  kv.k.row(kv.len) = lin_fwd(layer.self.k, xn).row(0);
  kv.v.row(kv.len) = lin_fwd(layer.self.v, xn).row(0);
  ++kv.len;
  MatrixXd q = lin_fwd(layer.self.q, xn);
  MatrixXd ctx(1, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int h = 0; h < heads; ++h) {
    auto kh = kv.k.topRows(kv.len).middleCols(h * dk, dk);
    auto vh = kv.v.topRows(kv.len).middleCols(h * dk, dk);
    Eigen::RowVectorXd s = q.middleCols(h * dk, dk) * kh.transpose() * scale;
    const double mx = s.maxCoeff();
    Eigen::RowVectorXd e = (s.array() - mx).exp();
    e /= e.sum();
    ctx.middleCols(h * dk, dk).noalias() = e * vh;
  }
  x += lin_fwd(layer.self.o, ctx);
  // cross-attention against the precomputed encoder keys/values
  xn = norm_fwd(layer.cross.ln, x, nc);
  q = lin_fwd(layer.cross.q, xn);
  for (int h = 0; h < heads; ++h) {
    auto kh = kv.ck.middleCols(h * dk, dk);
    auto vh = kv.cv.middleCols(h * dk, dk);
    Eigen::RowVectorXd s = q.middleCols(h * dk, dk) * kh.transpose() * scale;
    const double mx = s.maxCoeff();
    Eigen::RowVectorXd e = (s.array() - mx).exp();
    e /= e.sum();
    ctx.middleCols(h * dk, dk).noalias() = e * vh;
  }
  x += lin_fwd(layer.cross.o, ctx);
  // mlp
  xn = norm_fwd(layer.mlp.ln, x, nc);
  x += lin_fwd(layer.mlp.fc2, gelu_fwd(lin_fwd(layer.mlp.fc1, xn)));
  return x;
}

}  // namespace

DecodeResult Model::greedy_decode(DecoderId dec, std::span<const int> prompt,
                                  const VisualEmbeddings& v, int max_len) const {
  const DecoderParams& D = params_->dec[static_cast<std::size_t>(dec)];
  if (prompt.empty()) {
    throw std::invalid_argument("greedy_decode: empty prompt");
  }
  max_len = std::min<int>(max_len, static_cast<int>(D.pos.rows()));
  if (static_cast<int>(prompt.size()) >= max_len) {
    throw std::invalid_argument("greedy_decode: prompt length " +
                                std::to_string(prompt.size()) +
                                " leaves no room under max_len " +
                                std::to_string(max_len));
  }
  std::vector<LayerKv> kv(D.layers.size());
  for (std::size_t i = 0; i < D.layers.size(); ++i) {
    kv[i].k = MatrixXd::Zero(max_len, cfg_.d);
    kv[i].v = MatrixXd::Zero(max_len, cfg_.d);
    kv[i].ck = lin_fwd(D.layers[i].cross.k, v.v);
    kv[i].cv = lin_fwd(D.layers[i].cross.v, v.v);
  }
  DecodeResult out;
  out.ids.assign(prompt.begin(), prompt.end());
  NormCache nc;
  for (int pos = 0; pos < static_cast<int>(out.ids.size()); ++pos) {
    MatrixXd x =
        D.embed.row(out.ids[static_cast<std::size_t>(pos)]) + D.pos.row(pos);
    for (std::size_t i = 0; i < D.layers.size(); ++i) {
      x = step_layer(D.layers[i], std::move(x), kv[i], cfg_.heads);
    }
    if (pos + 1 < static_cast<int>(out.ids.size())) continue;  // prompt feed
    const MatrixXd yn = norm_fwd(D.ln_f, x, nc);
    Eigen::RowVectorXd logits = lin_fwd(D.out, yn).row(0);
    Eigen::Index arg = 0;
    logits.maxCoeff(&arg);
    const int next = static_cast<int>(arg);
    out.ids.push_back(next);
    if (next == vocab_.eos()) return out;
    if (static_cast<int>(out.ids.size()) >= max_len) break;  // no room left
  }
  out.truncated = true;
  return out;
}

// --- sequence assembly -----------------------------------------------------------

std::vector<std::pair<DecoderId, StructuredSequence>> Model::sample_sequences(
    const Sample& sample, const PromptSpec& prompt) const {
  const QuantizerConfig qc{cfg_.n_bins};
  const SequenceLimits limits{cfg_.max_structured, cfg_.max_region,
                              cfg_.max_content};
  std::vector<std::pair<DecoderId, StructuredSequence>> seqs;
  switch (cfg_.task) {
    case Task::spotting: {
      auto kept = filter_by_prefix(
          filter_by_spatial(sample.instances, prompt.window, qc), prompt.prefix);
      seqs.push_back({DecoderId::structured,
                      build_spotting_stage1(kept, prompt, vocab_, qc, limits)});
      break;
    }
    case Task::kie: {
      auto kept = filter_by_prefix(
          filter_by_spatial(sample.instances, prompt.window, qc), prompt.prefix);
      seqs.push_back({DecoderId::structured,
                      build_kie_stage1(kept, prompt, vocab_, qc, limits)});
      break;
    }
    case Task::hiertext:
      seqs.push_back({DecoderId::structured,
                      build_hier_stage1(sample.instances, vocab_, qc, limits)});
      break;
    case Task::table: {
      if (!sample.table) {
        throw std::invalid_argument("sample '" + sample.id + "' has no table");
      }
      seqs.push_back({DecoderId::structured,
                      table_structure_sequence(*sample.table, vocab_, qc, limits)});
      for (auto& s : build_table_content_targets(*sample.table, vocab_, qc,
                                                 limits)) {
        seqs.push_back({DecoderId::content, std::move(s)});
      }
      return seqs;  // no region decoding for tables
    }
  }
  for (const TextInstance& inst : sample.instances) {
    seqs.push_back({DecoderId::region, build_region_sequence(inst, vocab_, qc)});
    seqs.push_back(
        {DecoderId::content, build_content_sequence(inst, vocab_, qc, limits)});
  }
  return seqs;
}

// --- loss hooks -------------------------------------------------------------------

double Model::sample_loss(const Sample& sample, const PromptSpec& prompt) const {
  SynthConfig rc;
  rc.grid_size = cfg_.grid_size;
  const VisualEmbeddings v = encode(render_feature_grid(sample, rc));
  double loss = 0.0;
  for (const auto& [dec, seq] : sample_sequences(sample, prompt)) {
    const TrainingTarget tt = make_training_target(seq, vocab_);
    const MatrixXd logits = decoder_logits(dec, tt.inputs, v);
    loss += wnll_impl(logits, tt, nullptr);
  }
  return loss;
}

double Model::sample_loss_and_grad(const Sample& sample,
                                   const PromptSpec& prompt) {
  SynthConfig rc;
  rc.grid_size = cfg_.grid_size;
  const MatrixXd patches = patchify(render_feature_grid(sample, rc), cfg_.patch);
  visit_params(*grads_, [](const std::string&, MatrixXd& t) { t.setZero(); });
  EncCache enc_cache;
  const MatrixXd mem = encoder_fwd(*params_, patches, cfg_.heads, enc_cache);
  MatrixXd dmem = MatrixXd::Zero(mem.rows(), mem.cols());
  double loss = 0.0;
  for (const auto& [dec, seq] : sample_sequences(sample, prompt)) {
    const TrainingTarget tt = make_training_target(seq, vocab_);
    DecCache cache;
    const MatrixXd logits =
        decoder_fwd(params_->dec[static_cast<std::size_t>(dec)], tt.inputs,
                    mem, cfg_.heads, cache);
    MatrixXd dlogits;
    loss += wnll_impl(logits, tt, &dlogits);
    decoder_bwd(params_->dec[static_cast<std::size_t>(dec)], cache, dlogits,
                cfg_.heads, grads_->dec[static_cast<std::size_t>(dec)], dmem);
  }
  encoder_bwd(*params_, enc_cache, dmem, cfg_.heads, *grads_);
  return loss;
}

void Model::for_each_parameter(
    const std::function<void(const std::string&, Eigen::MatrixXd&,
                             Eigen::MatrixXd&)>& fn) {
  std::vector<std::pair<std::string, MatrixXd*>> values, grads;
  visit_params(*params_, [&](const std::string& n, MatrixXd& t) {
    values.emplace_back(n, &t);
  });
  visit_params(*grads_, [&](const std::string& n, MatrixXd& t) {
    grads.emplace_back(n, &t);
  });
  for (std::size_t i = 0; i < values.size(); ++i) {
    fn(values[i].first, *values[i].second, *grads[i].second);
  }
}

// --- training ----------------------------------------------------------------------

TrainReport Model::train(std::span<const Sample> corpus) {
  if (corpus.empty()) {
    throw std::invalid_argument("train: empty corpus");
  }
  for (const Sample& s : corpus) {
    if (s.task != cfg_.task) {
      throw std::invalid_argument("train: sample '" + s.id + "' is task " +
                                  to_string(s.task) + ", model is " +
                                  to_string(cfg_.task));
    }
  }
  const QuantizerConfig qc{cfg_.n_bins};
  const PromptSpec def = default_prompt(qc);
  const bool windowed = cfg_.task == Task::spotting || cfg_.task == Task::kie;

  SynthConfig rc;
  rc.grid_size = cfg_.grid_size;
  std::vector<MatrixXd> patches;
  patches.reserve(corpus.size());
  for (const Sample& s : corpus) {
    patches.push_back(patchify(render_feature_grid(s, rc), cfg_.patch));
  }

  Rng rng(cfg_.seed ^ 0x7261696Eull);
  TrainReport report;
  report.loss_curve.reserve(static_cast<std::size_t>(cfg_.steps));
  const std::size_t batch = static_cast<std::size_t>(cfg_.batch);
  for (int step = 0; step < cfg_.steps; ++step) {
    // one mini-batch: `batch` consecutive samples, round-robin
    struct Item {
      std::size_t slot;
      DecoderId dec;
      TrainingTarget target;
    };
    std::vector<Item> items;
    std::vector<std::size_t> sample_ids;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t idx =
          (static_cast<std::size_t>(step) * batch + b) % corpus.size();
      PromptSpec prompt = def;
      if (windowed) {
        prompt.window = sample_spatial_window(rng, qc);
        prompt.prefix = sample_prefix_window(rng);
      }
      sample_ids.push_back(idx);
      for (const auto& [dec, seq] : sample_sequences(corpus[idx], prompt)) {
        items.push_back({b, dec, make_training_target(seq, vocab_)});
      }
    }

    // per-decoder weight totals: each decoder head contributes its
    // weight-normalized mean to the step loss, so the shared encoder sees
    // the three heads equally no matter how their sequence lengths differ
    std::array<double, 3> dec_weight{0.0, 0.0, 0.0};
    for (const Item& it : items) {
      dec_weight[static_cast<std::size_t>(it.dec)] += total_weight(it.target);
    }
    for (double& w : dec_weight) {
      if (w == 0.0) w = 1.0;
    }

    visit_params(*grads_, [](const std::string&, MatrixXd& t) { t.setZero(); });
    double loss = 0.0;
    for (std::size_t b = 0; b < sample_ids.size(); ++b) {
      const std::size_t idx = sample_ids[b];
      EncCache enc_cache;
      const MatrixXd mem =
          encoder_fwd(*params_, patches[idx], cfg_.heads, enc_cache);
      MatrixXd dmem = MatrixXd::Zero(mem.rows(), mem.cols());
      for (const Item& it : items) {
        if (it.slot != b) continue;
        const auto d = static_cast<std::size_t>(it.dec);
        DecCache cache;
        const MatrixXd logits =
            decoder_fwd(params_->dec[d], it.target.inputs, mem, cfg_.heads, cache);
        MatrixXd dlogits;
        loss += wnll_impl(logits, it.target, &dlogits) / dec_weight[d];
        dlogits /= dec_weight[d];
        decoder_bwd(params_->dec[d], cache, dlogits, cfg_.heads,
                    grads_->dec[d], dmem);
      }
      encoder_bwd(*params_, enc_cache, dmem, cfg_.heads, *grads_);
    }

    if (!std::isfinite(loss)) {
      throw std::runtime_error("train: non-finite loss at step " +
                               std::to_string(step));
    }
    report.loss_curve.push_back(loss);

    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      visit_params(*grads_, [&](const std::string&, MatrixXd& t) {
        sq += t.squaredNorm();
      });
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) {
        const double scale = cfg_.clip_norm / norm;
        visit_params(*grads_,
                     [&](const std::string&, MatrixXd& t) { t *= scale; });
      }
    }

    // linear warmup, then linear decay to a tenth of the base rate
    double lr = cfg_.lr;
    if (cfg_.warmup > 0 && step < cfg_.warmup) {
      lr *= static_cast<double>(step + 1) / cfg_.warmup;
    } else if (cfg_.steps > cfg_.warmup) {
      const double t = static_cast<double>(step - cfg_.warmup) /
                       std::max(1, cfg_.steps - cfg_.warmup);
      lr *= 1.0 - 0.9 * t;
    }

    std::vector<MatrixXd*> gs, m1, m2, ps;
    visit_params(*grads_, [&](const std::string&, MatrixXd& t) { gs.push_back(&t); });
    visit_params(*moment1_, [&](const std::string&, MatrixXd& t) { m1.push_back(&t); });
    visit_params(*moment2_, [&](const std::string&, MatrixXd& t) { m2.push_back(&t); });
    visit_params(*params_, [&](const std::string&, MatrixXd& t) { ps.push_back(&t); });
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step + 1);
    for (std::size_t i = 0; i < gs.size(); ++i) {
      *m1[i] = cfg_.beta1 * *m1[i] + (1.0 - cfg_.beta1) * *gs[i];
      *m2[i] = cfg_.beta2 * *m2[i] + (1.0 - cfg_.beta2) * gs[i]->array().square().matrix();
      ps[i]->array() -= lr * (m1[i]->array() / bc1) /
                        ((m2[i]->array() / bc2).sqrt() + cfg_.adam_eps);
    }
  }
  report.steps = cfg_.steps;
  report.final_loss = report.loss_curve.empty() ? 0.0 : report.loss_curve.back();
  return report;
}

// --- evaluation helpers ---------------------------------------------------------

double Model::token_accuracy(std::span<const Sample> corpus) const {
  const QuantizerConfig qc{cfg_.n_bins};
  const PromptSpec def = default_prompt(qc);
  SynthConfig rc;
  rc.grid_size = cfg_.grid_size;
  std::size_t hits = 0, total = 0;
  for (const Sample& s : corpus) {
    const VisualEmbeddings v = encode(render_feature_grid(s, rc));
    for (const auto& [dec, seq] : sample_sequences(s, def)) {
      const TrainingTarget tt = make_training_target(seq, vocab_);
      const MatrixXd logits = decoder_logits(dec, tt.inputs, v);
      for (std::size_t j = static_cast<std::size_t>(std::max(tt.k, 0));
           j < tt.targets.size(); ++j) {
        if (tt.weights[j] == 0.0) continue;
        Eigen::Index arg = 0;
        logits.row(static_cast<Eigen::Index>(j)).maxCoeff(&arg);
        hits += static_cast<int>(arg) == tt.targets[j] ? 1 : 0;
        ++total;
      }
    }
  }
  return total == 0 ? 1.0 : static_cast<double>(hits) / static_cast<double>(total);
}

double Model::stage1_exact_match(std::span<const Sample> corpus) const {
  const QuantizerConfig qc{cfg_.n_bins};
  const PromptSpec def = default_prompt(qc);
  SynthConfig rc;
  rc.grid_size = cfg_.grid_size;
  std::size_t hits = 0;
  for (const Sample& s : corpus) {
    const VisualEmbeddings v = encode(render_feature_grid(s, rc));
    const auto seqs = sample_sequences(s, def);
    const std::vector<int> prompt_ids =
        cfg_.task == Task::spotting || cfg_.task == Task::kie
            ? prompt_token_ids(def, vocab_, qc)
            : std::vector<int>{vocab_.bos()};
    const DecodeResult dec =
        greedy_decode(DecoderId::structured, prompt_ids, v, cfg_.max_structured);
    hits += (!dec.truncated && dec.ids == seqs.front().second.ids) ? 1 : 0;
  }
  return corpus.empty() ? 1.0
                        : static_cast<double>(hits) / static_cast<double>(corpus.size());
}

// --- two-stage inference -----------------------------------------------------------

ParsedDocument Model::infer_document(const ImageGrid& img,
                                     const PromptSpec& prompt) const {
  const QuantizerConfig qc{cfg_.n_bins};
  const VisualEmbeddings v = encode(img);
  ParsedDocument doc;
  doc.task = cfg_.task;

  const std::vector<int> prompt_ids =
      cfg_.task == Task::spotting || cfg_.task == Task::kie
          ? prompt_token_ids(prompt, vocab_, qc)
          : std::vector<int>{vocab_.bos()};
  const DecodeResult stage1 =
      greedy_decode(DecoderId::structured, prompt_ids, v, cfg_.max_structured);
  doc.stage1_ids = stage1.ids;
  doc.truncated = stage1.truncated;
  if (stage1.truncated) {
    doc.diagnostics.push_back("stage 1 hit the length budget before </S>");
  }

  const auto decode_text = [&](const QuantizedPoint& q) {
    const std::vector<int> p{vocab_.coord_id(q.x), vocab_.coord_id(q.y)};
    const DecodeResult r =
        greedy_decode(DecoderId::content, p, v, cfg_.max_content);
    const ContentParse parse = parse_content_sequence(r.ids, vocab_);
    for (const std::string& d : parse.diagnostics) doc.diagnostics.push_back(d);
    return parse.text;
  };
  const auto decode_region = [&](const QuantizedPoint& q) {
    const std::vector<int> p{vocab_.coord_id(q.x), vocab_.coord_id(q.y)};
    const DecodeResult r =
        greedy_decode(DecoderId::region, p, v, cfg_.max_region);
    const RegionParse parse = parse_region_sequence(r.ids, vocab_, qc);
    if (!parse.complete) {
      doc.diagnostics.push_back("region decode incomplete at point " +
                                std::to_string(q.x) + "," + std::to_string(q.y));
    }
    for (const std::string& d : parse.diagnostics) doc.diagnostics.push_back(d);
    return parse.polygon;
  };
  const auto word_at = [&](const QuantizedPoint& q) {
    TextInstance inst;
    inst.polygon = decode_region(q);
    inst.text = decode_text(q);
    return inst;
  };

  StructuredSequence seq;
  seq.ids = stage1.ids;
  seq.k = static_cast<int>(prompt_ids.size());
  seq.task = cfg_.task;

  switch (cfg_.task) {
    case Task::spotting: {
      const Stage1Parse parse = parse_stage1(seq, vocab_);
      for (const std::string& d : parse.diagnostics) doc.diagnostics.push_back(d);
      for (const QuantizedPoint& q : parse.points) {
        doc.instances.push_back(word_at(q));
      }
      break;
    }
    case Task::kie: {
      const Stage1Parse parse = parse_stage1(seq, vocab_);
      for (const std::string& d : parse.diagnostics) doc.diagnostics.push_back(d);
      for (std::size_t g = 0; g < parse.groups.size(); ++g) {
        const EntityGroup& group = parse.groups[g];
        std::string value;
        for (const QuantizedPoint& q : group.points) {
          TextInstance inst = word_at(q);
          inst.entity = group.cls;
          inst.line_id = static_cast<int>(g);
          if (!value.empty()) value += ' ';
          value += inst.text;
          doc.instances.push_back(std::move(inst));
        }
        doc.fields.push_back({group.cls, value});
      }
      break;
    }
    case Task::hiertext: {
      const Stage1Parse parse = parse_stage1(seq, vocab_);
      for (const std::string& d : parse.diagnostics) doc.diagnostics.push_back(d);
      int line_id = 0;
      for (std::size_t p = 0; p < parse.paragraphs.size(); ++p) {
        for (const auto& line : parse.paragraphs[p]) {
          for (const QuantizedPoint& q : line) {
            TextInstance inst = word_at(q);
            inst.line_id = line_id;
            inst.para_id = static_cast<int>(p);
            doc.instances.push_back(std::move(inst));
          }
          ++line_id;
        }
      }
      break;
    }
    case Task::table: {
      const std::vector<std::string> tokens = vocab_.detokenize(stage1.ids);
      TokenGridParse parse = structure_tokens_to_grid(tokens, qc);
      for (const std::string& d : parse.diagnostics) doc.diagnostics.push_back(d);
      std::vector<std::string> texts;
      for (std::size_t i : structure_order(parse.grid)) {
        const TableCell& cell = parse.grid.cells[i];
        if (!cell.center) continue;
        texts.push_back(decode_text(quantize_point(*cell.center, qc)));
      }
      doc.html = assemble_html(parse.grid, texts);
      doc.grid = std::move(parse.grid);
      break;
    }
  }
  return doc;
}

// --- persistence ---------------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'V', 'S', 'T', 'P', 'M', 'O', 'D', 'L'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void Model::save(const std::filesystem::path& path) const {
  nlohmann::json tensors = nlohmann::json::array();
  visit_params(*params_, [&](const std::string& n, MatrixXd& t) {
    tensors.push_back({{"name", n}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  const nlohmann::json header{{"version", kVersion},
                              {"config", config_to_json(cfg_)},
                              {"tensors", std::move(tensors)}};
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  }
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t head_size = head.size();
  out.write(reinterpret_cast<const char*>(&head_size), sizeof(head_size));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  std::vector<double> buf;
  visit_params(*params_, [&](const std::string&, MatrixXd& t) {
    buf.resize(static_cast<std::size_t>(t.size()));
    Eigen::Index n = 0;
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        buf[static_cast<std::size_t>(n++)] = t(r, c);
      }
    }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(double)));
  });
  if (!out) {
    throw std::runtime_error("write to '" + path.string() + "' failed");
  }
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open '" + path.string() + "'");
  }
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("'" + path.string() + "' is not a model checkpoint");
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " unsupported (want " + std::to_string(kVersion) + ")");
  }
  std::uint64_t head_size = 0;
  in.read(reinterpret_cast<char*>(&head_size), sizeof(head_size));
  std::string head(head_size, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_size));
  if (!in) {
    throw std::runtime_error("truncated checkpoint header in '" + path.string() + "'");
  }
  const nlohmann::json header = nlohmann::json::parse(head);
  Model model(config_from_json(header.at("config")));

  const auto& tensors = header.at("tensors");
  std::size_t index = 0;
  std::vector<double> buf;
  visit_params(*model.params_, [&](const std::string& n, MatrixXd& t) {
    if (index >= tensors.size()) {
      throw std::runtime_error("checkpoint lists too few tensors");
    }
    const auto& meta = tensors[index++];
    if (meta.at("name").get<std::string>() != n ||
        meta.at("rows").get<Eigen::Index>() != t.rows() ||
        meta.at("cols").get<Eigen::Index>() != t.cols()) {
      throw std::runtime_error("checkpoint tensor mismatch at '" + n + "'");
    }
    buf.resize(static_cast<std::size_t>(t.size()));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (!in) {
      throw std::runtime_error("truncated checkpoint tensor '" + n + "'");
    }
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        t(r, c) = buf[static_cast<std::size_t>(k++)];
      }
    }
  });
  if (index != tensors.size()) {
    throw std::runtime_error("checkpoint lists too many tensors");
  }
  return model;
}

}  // namespace vstp
