#include "istd/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "istd/rng.hpp"

namespace istd {

namespace {

// Copies an H*W plane into the interior of a zeroed (H+2)*(W+2) buffer.
void pad_plane(const double* src, double* dst, int W, int H) {
    const int PW = W + 2;
    std::memset(dst, 0, sizeof(double) * static_cast<std::size_t>(PW) * (H + 2));
    for (int y = 0; y < H; ++y) {
        std::memcpy(dst + static_cast<std::size_t>(y + 1) * PW + 1,
                    src + static_cast<std::size_t>(y) * W, sizeof(double) * W);
    }
}

// out[oc] = bias[oc] + sum_ic w[oc][ic] (x) padded_in[ic], 3x3 kernels.
// Single pass per (oc,ic) pair: 9 taps fused so each row is streamed once.
void conv3x3(const double* padded_in, int cin, const double* w, const double* b, int cout,
             double* out, int W, int H) {
    const int PW = W + 2;
    const std::size_t plane = static_cast<std::size_t>(W) * H;
    const std::size_t pplane = static_cast<std::size_t>(PW) * (H + 2);
    for (int oc = 0; oc < cout; ++oc) {
        double* op = out + oc * plane;
        const double bias = b[oc];
        for (std::size_t i = 0; i < plane; ++i) {
            op[i] = bias;
        }
        for (int ic = 0; ic < cin; ++ic) {
            const double* ip = padded_in + ic * pplane;
            const double* wk = w + (static_cast<std::size_t>(oc) * cin + ic) * 9;
            const double w00 = wk[0], w01 = wk[1], w02 = wk[2];
            const double w10 = wk[3], w11 = wk[4], w12 = wk[5];
            const double w20 = wk[6], w21 = wk[7], w22 = wk[8];
            for (int y = 0; y < H; ++y) {
                const double* r0 = ip + static_cast<std::size_t>(y) * PW;
                const double* r1 = r0 + PW;
                const double* r2 = r1 + PW;
                double* orow = op + static_cast<std::size_t>(y) * W;
                for (int x = 0; x < W; ++x) {
                    orow[x] += w00 * r0[x] + w01 * r0[x + 1] + w02 * r0[x + 2] +
                               w10 * r1[x] + w11 * r1[x + 1] + w12 * r1[x + 2] +
                               w20 * r2[x] + w21 * r2[x + 1] + w22 * r2[x + 2];
                }
            }
        }
    }
}

// Gradients of conv3x3. d_w/d_b accumulate from (d_out, padded_in); the data
// gradient is a gather over padded d_out with the flipped kernel, written to
// unpadded d_in planes.
void conv3x3_backward(const double* padded_in, int cin, const double* w, int cout,
                      const double* d_out, double* d_w, double* d_b, double* d_in, int W,
                      int H) {
    const int PW = W + 2;
    const std::size_t plane = static_cast<std::size_t>(W) * H;
    const std::size_t pplane = static_cast<std::size_t>(PW) * (H + 2);

    std::vector<double> d_out_padded;
    if (d_in) {
        d_out_padded.resize(static_cast<std::size_t>(cout) * pplane);
        for (int oc = 0; oc < cout; ++oc) {
            pad_plane(d_out + oc * plane, d_out_padded.data() + oc * pplane, W, H);
        }
        std::memset(d_in, 0, sizeof(double) * static_cast<std::size_t>(cin) * plane);
    }

    for (int oc = 0; oc < cout; ++oc) {
        const double* dop = d_out + oc * plane;
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
            acc += dop[i];
        }
        d_b[oc] += acc;
        for (int ic = 0; ic < cin; ++ic) {
            const double* ip = padded_in + ic * pplane;
            double* dwk = d_w + (static_cast<std::size_t>(oc) * cin + ic) * 9;
            double s00 = 0, s01 = 0, s02 = 0, s10 = 0, s11 = 0, s12 = 0, s20 = 0, s21 = 0,
                   s22 = 0;
            for (int y = 0; y < H; ++y) {
                const double* r0 = ip + static_cast<std::size_t>(y) * PW;
                const double* r1 = r0 + PW;
                const double* r2 = r1 + PW;
                const double* drow = dop + static_cast<std::size_t>(y) * W;
                for (int x = 0; x < W; ++x) {
                    const double d = drow[x];
                    s00 += d * r0[x];
                    s01 += d * r0[x + 1];
                    s02 += d * r0[x + 2];
                    s10 += d * r1[x];
                    s11 += d * r1[x + 1];
                    s12 += d * r1[x + 2];
                    s20 += d * r2[x];
                    s21 += d * r2[x + 1];
                    s22 += d * r2[x + 2];
                }
            }
            dwk[0] += s00;
            dwk[1] += s01;
            dwk[2] += s02;
            dwk[3] += s10;
            dwk[4] += s11;
            dwk[5] += s12;
            dwk[6] += s20;
            dwk[7] += s21;
            dwk[8] += s22;

            if (d_in) {
                const double* wk = w + (static_cast<std::size_t>(oc) * cin + ic) * 9;
                // Flipped kernel gather: d_in(y,x) = sum w[ky][kx] *
                // d_out(y+1-ky, x+1-kx).
                const double f00 = wk[8], f01 = wk[7], f02 = wk[6];
                const double f10 = wk[5], f11 = wk[4], f12 = wk[3];
                const double f20 = wk[2], f21 = wk[1], f22 = wk[0];
                const double* dp = d_out_padded.data() + oc * pplane;
                double* dst = d_in + ic * plane;
                for (int y = 0; y < H; ++y) {
                    const double* r0 = dp + static_cast<std::size_t>(y) * PW;
                    const double* r1 = r0 + PW;
                    const double* r2 = r1 + PW;
                    double* drow = dst + static_cast<std::size_t>(y) * W;
                    for (int x = 0; x < W; ++x) {
                        drow[x] += f00 * r0[x] + f01 * r0[x + 1] + f02 * r0[x + 2] +
                                   f10 * r1[x] + f11 * r1[x + 1] + f12 * r1[x + 2] +
                                   f20 * r2[x] + f21 * r2[x + 1] + f22 * r2[x + 2];
                    }
                }
            }
        }
    }
}

void leaky(const double* pre, double* act, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        act[i] = pre[i] > 0.0 ? pre[i] : kLeakySlope * pre[i];
    }
}

} // namespace

DetectorState DetectorState::init(uint64_t seed) {
    DetectorState s;
    s.params.assign(kDetectorParamCount, 0.0);
    s.m.assign(kDetectorParamCount, 0.0);
    s.v.assign(kDetectorParamCount, 0.0);
    Rng rng(seed);
    const double std1 = std::sqrt(2.0 / 9.0);
    const double std23 = std::sqrt(2.0 / 72.0);
    for (int i = kW1; i < kB1; ++i) {
        s.params[i] = std1 * rng.normal();
    }
    for (int i = kW2; i < kB2; ++i) {
        s.params[i] = std23 * rng.normal();
    }
    for (int i = kW3; i < kB3; ++i) {
        s.params[i] = std23 * rng.normal();
    }
    return s;
}

bool DetectorState::all_finite() const {
    for (const auto* vec : {&params, &m, &v}) {
        for (double x : *vec) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
    }
    return true;
}

DetectorForward detector_forward(const DetectorState& state, const ScalarField& image) {
    if (state.params.size() != kDetectorParamCount) {
        throw InvalidParam("detector_forward: bad parameter vector length");
    }
    const int W = image.width();
    const int H = image.height();
    const std::size_t plane = static_cast<std::size_t>(W) * H;
    const std::size_t pplane = static_cast<std::size_t>(W + 2) * (H + 2);
    const int C = kDetectorChannels;
    const double* P = state.params.data();

    DetectorForward out;
    DetectorTape& t = out.tape;
    t.width = W;
    t.height = H;
    t.params = state.params;
    t.padded_input.resize(pplane);
    pad_plane(image.data().data(), t.padded_input.data(), W, H);

    t.pre1.resize(plane * C);
    conv3x3(t.padded_input.data(), 1, P + kW1, P + kB1, C, t.pre1.data(), W, H);

    std::vector<double> act(plane * C);
    leaky(t.pre1.data(), act.data(), plane * C);
    t.padded_act1.resize(pplane * C);
    for (int c = 0; c < C; ++c) {
        pad_plane(act.data() + c * plane, t.padded_act1.data() + c * pplane, W, H);
    }

    t.pre2.resize(plane * C);
    conv3x3(t.padded_act1.data(), C, P + kW2, P + kB2, C, t.pre2.data(), W, H);

    leaky(t.pre2.data(), act.data(), plane * C);
    t.padded_act2.resize(pplane * C);
    for (int c = 0; c < C; ++c) {
        pad_plane(act.data() + c * plane, t.padded_act2.data() + c * pplane, W, H);
    }

    std::vector<double> pre3(plane);
    conv3x3(t.padded_act2.data(), C, P + kW3, P + kB3, 1, pre3.data(), W, H);

    out.prediction = ScalarField(W, H);
    t.pred.resize(plane);
    for (std::size_t i = 0; i < plane; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-pre3[i]));
        t.pred[i] = s;
        out.prediction[i] = s;
    }
    return out;
}

std::vector<double> detector_backward(const DetectorTape& tape, const ScalarField& upstream) {
    const int W = tape.width;
    const int H = tape.height;
    if (W <= 0 || H <= 0 || tape.params.size() != kDetectorParamCount ||
        tape.pred.size() != static_cast<std::size_t>(W) * H) {
        throw TapeError("detector_backward: empty or corrupt tape");
    }
    if (upstream.width() != W || upstream.height() != H) {
        throw TapeError("detector_backward: upstream shape does not match the tape");
    }
    const std::size_t plane = static_cast<std::size_t>(W) * H;
    const std::size_t pplane = static_cast<std::size_t>(W + 2) * (H + 2);
    const int C = kDetectorChannels;
    const double* P = tape.params.data();

    std::vector<double> grad(kDetectorParamCount, 0.0);

    // Logistic output.
    std::vector<double> d_pre3(plane);
    for (std::size_t i = 0; i < plane; ++i) {
        const double s = tape.pred[i];
        d_pre3[i] = upstream[i] * s * (1.0 - s);
    }

    // conv3 backward -> d act2.
    std::vector<double> d_act2(plane * C);
    conv3x3_backward(tape.padded_act2.data(), C, P + kW3, 1, d_pre3.data(), grad.data() + kW3,
                     grad.data() + kB3, d_act2.data(), W, H);

    std::vector<double> d_pre2(plane * C);
    for (std::size_t i = 0; i < plane * C; ++i) {
        d_pre2[i] = tape.pre2[i] > 0.0 ? d_act2[i] : kLeakySlope * d_act2[i];
    }

    std::vector<double> d_act1(plane * C);
    conv3x3_backward(tape.padded_act1.data(), C, P + kW2, C, d_pre2.data(), grad.data() + kW2,
                     grad.data() + kB2, d_act1.data(), W, H);

    std::vector<double> d_pre1(plane * C);
    for (std::size_t i = 0; i < plane * C; ++i) {
        d_pre1[i] = tape.pre1[i] > 0.0 ? d_act1[i] : kLeakySlope * d_act1[i];
    }

    // No input gradient needed.
    conv3x3_backward(tape.padded_input.data(), 1, P + kW1, C, d_pre1.data(), grad.data() + kW1,
                     grad.data() + kB1, nullptr, W, H);
    return grad;
}

SoftIou soft_iou_loss(const ScalarField& pred, const ScalarField& target) {
    if (!pred.same_shape(target)) {
        throw ShapeError("soft_iou_loss: shape mismatch");
    }
    double inter = 0.0, sum_p = 0.0, sum_t = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        inter += pred[i] * target[i];
        sum_p += pred[i];
        sum_t += target[i];
    }
    const double uni = sum_p + sum_t - inter + kSoftIouEps;
    SoftIou out;
    out.loss = 1.0 - inter / uni;
    out.grad_pred = ScalarField(pred.width(), pred.height());
    const double inv_u2 = 1.0 / (uni * uni);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double t = target[i];
        out.grad_pred[i] = -(t * uni - inter * (1.0 - t)) * inv_u2;
    }
    return out;
}

void adamw_step(DetectorState& state, const std::vector<double>& grad, double lr,
                double weight_decay, double beta1, double beta2, double eps) {
    if (grad.size() != state.params.size()) {
        throw ShapeError("adamw_step: gradient length mismatch");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < state.params.size(); ++i) {
        const double g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        const double mh = state.m[i] / bc1;
        const double vh = state.v[i] / bc2;
        state.params[i] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * state.params[i]);
    }
}

namespace {

void put_u32le(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_u64le(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_f64le(std::string& buf, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64le(buf, bits);
}

uint64_t get_u64le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const DetectorState& state) {
    std::string buf = "DCKP";
    put_u32le(buf, static_cast<uint32_t>(state.params.size()));
    for (double x : state.params) {
        put_f64le(buf, x);
    }
    for (double x : state.m) {
        put_f64le(buf, x);
    }
    for (double x : state.v) {
        put_f64le(buf, x);
    }
    put_u64le(buf, state.step);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !out.write(buf.data(), static_cast<std::streamsize>(buf.size()))) {
        throw IngestError(path + ": cannot write checkpoint");
    }
}

DetectorState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IngestError(path + ": cannot open");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string body = ss.str();
    if (body.size() < 8 || body.compare(0, 4, "DCKP") != 0) {
        throw IngestError(path + ": bad magic, expected DCKP");
    }
    const unsigned char* p = reinterpret_cast<const unsigned char*>(body.data());
    uint32_t count = 0;
    for (int i = 3; i >= 0; --i) {
        count = (count << 8) | p[4 + i];
    }
    const std::size_t need = 8 + static_cast<std::size_t>(count) * 8 * 3 + 8;
    if (count != kDetectorParamCount || body.size() < need) {
        throw IngestError(path + ": checkpoint does not match the detector layout");
    }
    DetectorState s;
    s.params.resize(count);
    s.m.resize(count);
    s.v.resize(count);
    const unsigned char* q = p + 8;
    auto read_vec = [&](std::vector<double>& dst) {
        for (auto& x : dst) {
            const uint64_t bits = get_u64le(q);
            std::memcpy(&x, &bits, 8);
            q += 8;
        }
    };
    read_vec(s.params);
    read_vec(s.m);
    read_vec(s.v);
    s.step = get_u64le(q);
    return s;
}

} // namespace istd
