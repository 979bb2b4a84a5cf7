#include "cone/model.hpp"

#include <algorithm>
#include <cmath>

#include "tensor_json.hpp"

namespace cone {
namespace {

Linear make_linear(std::size_t fan_in, std::size_t fan_out, SeededRng &rng) {
  Linear layer{Matrix(fan_in, fan_out), Vector(fan_out, 0.0)};
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double &w : layer.weight.values()) w = rng.uniform(-bound, bound);
  return layer;
}

Matrix affine(const Matrix &x, const Linear &layer) {
  Matrix out = matmul(x, layer.weight);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.bias[c];
  }
  return out;
}

Matrix relu(const Matrix &x) {
  Matrix out = x;
  for (double &v : out.values()) v = std::max(v, 0.0);
  return out;
}

void mask_relu(Matrix &grad, const Matrix &pre) {
  auto g = grad.values();
  auto p = pre.values();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(p[i] > 0.0)) g[i] = 0.0;
}

// Fills `grads` for one affine layer and returns dL/dinput.
Matrix linear_backward(const Linear &layer, const Matrix &input, const Matrix &grad_out,
                       Linear &grads) {
  grads.weight = matmul(input.transpose(), grad_out);
  grads.bias.assign(layer.fan_out(), 0.0);
  for (std::size_t r = 0; r < grad_out.rows(); ++r) {
    auto row = grad_out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) grads.bias[c] += row[c];
  }
  return matmul_transposed(grad_out, layer.weight);
}

void require_shape(const Matrix &m, std::size_t rows, std::size_t cols, const char *what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                         std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()));
  }
}

}  // namespace

void ModelShape::validate() const {
  if (input_dim == 0 || backbone_dims.empty() || proj_hidden == 0 || proj_dim == 0 ||
      num_classes == 0) {
    throw std::invalid_argument("ModelShape: all dimensions must be positive");
  }
  for (auto d : backbone_dims)
    if (d == 0) throw std::invalid_argument("ModelShape: zero-width backbone layer");
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor(*this, [&](const std::string &, std::span<const double> v, bool) {
    n += v.size();
  });
  return n;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each_tensor(*this, [&](const std::string &, std::span<const double> v, bool) {
    for (double x : v) ok = ok && std::isfinite(x);
  });
  return ok;
}

FeatureVec ForwardTrace::z(std::size_t row) const {
  auto r = embedding.row(row);
  return FeatureVec::from_unit(Vector(r.begin(), r.end()));
}

ModelParams init_params(const ModelShape &shape, SeededRng &rng) {
  shape.validate();
  ModelParams p;
  p.shape = shape;
  std::size_t in = shape.input_dim;
  for (std::size_t out : shape.backbone_dims) {
    p.backbone.push_back(make_linear(in, out, rng));
    in = out;
  }
  p.projection.push_back(make_linear(shape.feature_dim(), shape.proj_hidden, rng));
  p.projection.push_back(make_linear(shape.proj_hidden, shape.proj_dim, rng));

  const std::size_t cdim = shape.classifier_dim();
  const double bound = std::sqrt(6.0 / static_cast<double>(cdim + shape.num_classes));
  p.classifier = Matrix(shape.num_classes, cdim);
  for (double &w : p.classifier.values()) w = rng.uniform(-bound, bound);
  return p;
}

ParamGrads zeros_like(const ModelParams &params) {
  ParamGrads g = params;
  for_each_tensor(g, [](const std::string &, std::span<double> v, bool) {
    std::fill(v.begin(), v.end(), 0.0);
  });
  return g;
}

ForwardTrace forward(const ModelParams &params, const Matrix &batch) {
  if (batch.cols() != params.shape.input_dim) {
    throw DimensionError("forward: batch has " + std::to_string(batch.cols()) +
                         " columns, model expects " + std::to_string(params.shape.input_dim));
  }
  ForwardTrace t;
  t.input = batch;

  const Matrix *x = &t.input;
  const std::size_t last = params.backbone.size() - 1;
  for (std::size_t l = 0; l < params.backbone.size(); ++l) {
    t.backbone_pre.push_back(affine(*x, params.backbone[l]));
    t.backbone_act.push_back(l < last ? relu(t.backbone_pre.back()) : t.backbone_pre.back());
    x = &t.backbone_act.back();
  }

  t.proj_hidden_pre = affine(t.feature(), params.projection[0]);
  t.proj_hidden_act = relu(t.proj_hidden_pre);
  t.projection = affine(t.proj_hidden_act, params.projection[1]);

  t.embedding = Matrix(batch.rows(), params.shape.proj_dim);
  t.projection_norm.resize(batch.rows());
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    t.projection_norm[r] = l2_norm(t.projection.row(r));
    t.embedding.set_row(r, l2_normalize(t.projection.row(r)).values());
  }

  const Matrix &cls_in = params.shape.classifier_on_projection ? t.embedding : t.feature();
  t.logits = matmul_transposed(cls_in, params.classifier);
  return t;
}

ParamGrads backward(const ModelParams &params, const ForwardTrace &trace,
                    const Matrix &grad_logits, const Matrix &grad_z) {
  const std::size_t batch = trace.batch_size();
  require_shape(grad_logits, batch, params.shape.num_classes, "backward: grad_logits");
  require_shape(grad_z, batch, params.shape.proj_dim, "backward: grad_z");

  ParamGrads g = zeros_like(params);
  const bool on_proj = params.shape.classifier_on_projection;
  const Matrix &cls_in = on_proj ? trace.embedding : trace.feature();
  g.classifier = matmul(grad_logits.transpose(), cls_in);
  Matrix grad_cls_in = matmul(grad_logits, params.classifier);

  Matrix gz = grad_z;
  if (on_proj) {
    for (std::size_t i = 0; i < gz.size(); ++i) gz.values()[i] += grad_cls_in.values()[i];
  }

  // z = u / ||u||  =>  dL/du = (I - z z^T) dL/dz / ||u||
  Matrix grad_u(batch, params.shape.proj_dim);
  for (std::size_t r = 0; r < batch; ++r) {
    auto z = trace.embedding.row(r);
    auto gzr = gz.row(r);
    const double radial = dot(gzr, z);
    auto gu = grad_u.row(r);
    for (std::size_t c = 0; c < gu.size(); ++c)
      gu[c] = (gzr[c] - radial * z[c]) / trace.projection_norm[r];
  }

  Matrix grad_hidden =
      linear_backward(params.projection[1], trace.proj_hidden_act, grad_u, g.projection[1]);
  mask_relu(grad_hidden, trace.proj_hidden_pre);
  Matrix grad_h =
      linear_backward(params.projection[0], trace.feature(), grad_hidden, g.projection[0]);
  if (!on_proj) {
    for (std::size_t i = 0; i < grad_h.size(); ++i)
      grad_h.values()[i] += grad_cls_in.values()[i];
  }

  Matrix grad_act = std::move(grad_h);
  for (std::size_t l = params.backbone.size(); l-- > 0;) {
    if (l + 1 < params.backbone.size()) mask_relu(grad_act, trace.backbone_pre[l]);
    const Matrix &layer_in = l == 0 ? trace.input : trace.backbone_act[l - 1];
    grad_act = linear_backward(params.backbone[l], layer_in, grad_act, g.backbone[l]);
  }
  return g;
}

double block_relative_error(std::span<const double> analytic,
                            std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("block_relative_error: size mismatch");
  }
  double err = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    err = std::max(err, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return scale > 1e-12 ? err / scale : err;
}

GradCheckReport grad_check(const ModelParams &params, const Matrix &batch,
                           const TraceLoss &loss, const GradCheckOptions &options) {
  ForwardTrace trace = forward(params, batch);
  LossEval eval = loss(trace);
  ParamGrads analytic = backward(params, trace, eval.grad_logits, eval.grad_z);
  if (options.corrupt) options.corrupt(analytic);

  std::vector<std::span<const double>> analytic_blocks;
  for_each_tensor(analytic, [&](const std::string &, std::span<const double> v, bool) {
    analytic_blocks.push_back(v);
  });

  ModelParams probe = params;
  std::vector<std::pair<std::string, std::span<double>>> blocks;
  for_each_tensor(probe, [&](const std::string &name, std::span<double> v, bool) {
    blocks.emplace_back(name, v);
  });

  GradCheckReport report;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto &[name, values] = blocks[b];
    Vector numeric(values.size());
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + options.step;
      const double up = loss(forward(probe, batch)).value;
      values[j] = saved - options.step;
      const double down = loss(forward(probe, batch)).value;
      values[j] = saved;
      numeric[j] = (up - down) / (2.0 * options.step);
    }
    TensorCheck check{name, block_relative_error(analytic_blocks[b], numeric), 0.0};
    for (std::size_t j = 0; j < numeric.size(); ++j)
      check.max_abs_error =
          std::max(check.max_abs_error, std::abs(analytic_blocks[b][j] - numeric[j]));
    report.max_relative_error = std::max(report.max_relative_error, check.max_relative_error);
    report.tensors.push_back(std::move(check));
  }
  report.passed = report.max_relative_error <= options.tolerance;
  return report;
}

namespace {

nlohmann::json shape_to_json(const ModelShape &s) {
  return {{"input_dim", s.input_dim},
          {"backbone_dims", s.backbone_dims},
          {"proj_hidden", s.proj_hidden},
          {"proj_dim", s.proj_dim},
          {"num_classes", s.num_classes},
          {"classifier_on_projection", s.classifier_on_projection}};
}

ModelShape shape_from_json(const nlohmann::json &j) {
  ModelShape s;
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.backbone_dims = j.at("backbone_dims").get<std::vector<std::size_t>>();
  s.proj_hidden = j.at("proj_hidden").get<std::size_t>();
  s.proj_dim = j.at("proj_dim").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.classifier_on_projection = j.at("classifier_on_projection").get<bool>();
  s.validate();
  return s;
}

}  // namespace

void save_checkpoint(const ModelParams &params, const std::filesystem::path &path) {
  nlohmann::json tensors = nlohmann::json::array();
  auto save_stack = [&](const std::vector<Linear> &stack, const std::string &prefix) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
      const std::string base = prefix + "." + std::to_string(i);
      const Linear &layer = stack[i];
      tensors.push_back(detail::tensor_to_json(base + ".weight", layer.fan_in(),
                                               layer.fan_out(), layer.weight.values()));
      tensors.push_back(
          detail::tensor_to_json(base + ".bias", 1, layer.bias.size(), layer.bias));
    }
  };
  save_stack(params.backbone, "backbone");
  save_stack(params.projection, "projection");
  tensors.push_back(detail::tensor_to_json("classifier", params.classifier.rows(),
                                           params.classifier.cols(),
                                           params.classifier.values()));
  nlohmann::json doc = {{"magic", kCheckpointMagic},
                        {"version", kCheckpointVersion},
                        {"shape", shape_to_json(params.shape)},
                        {"tensors", std::move(tensors)}};
  detail::write_json_file(doc, path);
}

ModelParams load_checkpoint(const std::filesystem::path &path) {
  auto doc = detail::read_json_file(path);
  detail::check_magic(doc, kCheckpointMagic, kCheckpointVersion, path);
  ModelParams p;
  try {
    p.shape = shape_from_json(doc.at("shape"));
    const auto &tensors = doc.at("tensors");
    std::size_t next = 0;
    auto take = [&](const std::string &name) {
      if (next >= tensors.size()) throw std::runtime_error("missing tensor " + name);
      return detail::tensor_from_json(tensors[next++], name);
    };
    auto load_stack = [&](std::vector<Linear> &stack, std::size_t layers, std::string prefix) {
      for (std::size_t i = 0; i < layers; ++i) {
        std::string base = prefix + "." + std::to_string(i);
        Linear layer;
        layer.weight = take(base + ".weight");
        Matrix bias = take(base + ".bias");
        layer.bias.assign(bias.values().begin(), bias.values().end());
        stack.push_back(std::move(layer));
      }
    };
    load_stack(p.backbone, p.shape.backbone_dims.size(), "backbone");
    load_stack(p.projection, 2, "projection");
    p.classifier = take("classifier");
    if (next != tensors.size()) throw std::runtime_error("unexpected extra tensors");
  } catch (const nlohmann::json::exception &e) {
    throw std::runtime_error(path.string() + ": malformed checkpoint: " + e.what());
  }

  // Shapes must chain from the declared ModelShape.
  std::size_t in = p.shape.input_dim;
  for (std::size_t l = 0; l < p.backbone.size(); ++l) {
    const auto &layer = p.backbone[l];
    if (layer.fan_in() != in || layer.fan_out() != p.shape.backbone_dims[l] ||
        layer.bias.size() != layer.fan_out())
      throw std::runtime_error(path.string() + ": backbone layer shape mismatch");
    in = layer.fan_out();
  }
  if (p.projection[0].fan_in() != p.shape.feature_dim() ||
      p.projection[0].fan_out() != p.shape.proj_hidden ||
      p.projection[1].fan_in() != p.shape.proj_hidden ||
      p.projection[1].fan_out() != p.shape.proj_dim ||
      p.classifier.rows() != p.shape.num_classes ||
      p.classifier.cols() != p.shape.classifier_dim())
    throw std::runtime_error(path.string() + ": projection/classifier shape mismatch");
  if (!p.all_finite()) throw std::runtime_error(path.string() + ": non-finite parameters");
  return p;
}

}  // namespace cone
