import copy

import numpy as np
import pytest
import torch

from avatargen.errors import ParameterError
from avatargen.mini_flame import FlameParams, rodrigues
from avatargen.model import (
    AvatarModel,
    CanonicalFieldOutput,
    CodeLookupError,
    ModelConfig,
    PARTS,
    deform_normals,
    nearest_vertex,
    to_flame_canonical,
    to_subject_canonical,
    upsample_points,
)


def _small_config(**kw):
    base = dict(latent_dim=8, hidden_width=16, depth=2, pe_bands=2,
                shading_width=16, shading_depth=2, lighting_dim=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture()
def model(template):
    return AvatarModel(template, _small_config(), n_points=40, radius=0.03, seed=0)


def _randomize_heads(model, scale=0.05, seed=1):
    """Give the zero-initialized heads nontrivial weights for gradient tests."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for head in (model.deform_net.head_o1[-1], model.deform_net.head_o2,
                     model.deform_net.head_expr, model.deform_net.head_pose,
                     model.deform_net.head_weights):
            head.weight.copy_(torch.randn(head.weight.shape, generator=g) * scale)
            head.bias.copy_(torch.randn(head.bias.shape, generator=g) * scale)
    return model


def _as_double(model):
    """float64 copy; finite differences in float32 drown in rounding noise."""
    m = copy.deepcopy(model)
    m.double()
    m.template = m.template.astype(torch.float64)
    return m


# ---------------------------------------------------------------------------
# latent table


def test_compose_default_code(model):
    z = model.latent.compose()
    assert z.shape == (len(PARTS) + 1, 8)
    assert torch.equal(z[0], model.latent.identity)
    for i, part in enumerate(PARTS):
        assert torch.equal(z[i + 1], model.latent.defaults[part])


def test_compose_interpolation_endpoints(model):
    model.latent.add_part_code("hair", "a")
    model.latent.add_part_code("hair", "b")
    za = model.latent.compose({"hair": ("a", "b", 0.0)})
    zb = model.latent.compose({"hair": ("a", "b", 1.0)})
    assert torch.equal(za[1 + PARTS.index("hair")], model.latent.code_for("hair", "a"))
    assert torch.equal(zb[1 + PARTS.index("hair")], model.latent.code_for("hair", "b"))


def test_compose_interpolation_midpoint(model):
    model.latent.add_part_code("hair", "a")
    model.latent.add_part_code("hair", "b")
    z = model.latent.compose({"hair": ("a", "b", 0.5)})
    mean = (model.latent.code_for("hair", "a") + model.latent.code_for("hair", "b")) / 2
    assert torch.allclose(z[1 + PARTS.index("hair")], mean, atol=1e-7)


def test_compose_errors(model):
    with pytest.raises(CodeLookupError):
        model.latent.compose({"hair": "missing"})
    model.latent.add_part_code("hair", "a")
    model.latent.add_part_code("hair", "b")
    with pytest.raises(ParameterError):
        model.latent.compose({"hair": ("a", "b", 1.5)})
    with pytest.raises(ParameterError):
        model.latent.compose({"wings": "a"})


def test_code_sharing_invariant(model):
    model.latent.assign_video("v_target", {})
    model.latent.assign_video("v_hair", {"hair": "src1"})
    model.latent.assign_video("v_nose", {"nose": "src2"})
    before = {v: model.latent.compose_for_video(v).clone() for v in ("v_target", "v_hair", "v_nose")}
    with torch.no_grad():
        model.latent.identity += 1.0
    for v in before:
        assert not torch.equal(model.latent.compose_for_video(v), before[v])
    before = {v: model.latent.compose_for_video(v).clone() for v in ("v_target", "v_hair", "v_nose")}
    with torch.no_grad():
        model.latent.code_for("hair", "src1").add_(1.0)
    after = {v: model.latent.compose_for_video(v) for v in before}
    assert not torch.equal(after["v_hair"], before["v_hair"])
    assert torch.equal(after["v_target"], before["v_target"])
    assert torch.equal(after["v_nose"], before["v_nose"])


# ---------------------------------------------------------------------------
# deformation decoder


def test_deformation_initial_contract(model):
    z = model.latent.compose()
    out = model.deformation_forward(z, model.points)
    assert out.offset_gc_sc.abs().max() == 0.0
    assert out.offset_sc_fc.abs().max() == 0.0
    assert (out.skin_weights_pt - 1.0 / model.template.n_joints).abs().max() == 0.0


def test_deformation_deterministic(model):
    _randomize_heads(model)
    z = model.latent.compose()
    a = model.deformation_forward(z, model.points)
    b = model.deformation_forward(z, model.points)
    assert torch.equal(a.offset_gc_sc, b.offset_gc_sc)
    assert torch.equal(a.skin_weights_pt, b.skin_weights_pt)


def test_deformation_weight_simplex(model):
    _randomize_heads(model, scale=0.5)
    z = torch.randn(len(PARTS) + 1, 8)
    out = model.deformation_forward(z, torch.randn(30, 3))
    sums = out.skin_weights_pt.sum(dim=1)
    assert (sums - 1.0).abs().max() < 1e-6
    assert out.skin_weights_pt.min() >= 0.0


def test_deformation_gradient_wrt_code(model):
    m = _as_double(_randomize_heads(model))
    z = m.latent.compose().detach().clone().requires_grad_(True)
    pts = m.points.detach()[:8]

    def norm_of_offsets(code):
        out = m.deform_net(code, pts)
        return (out.offset_gc_sc ** 2).sum() + (out.offset_sc_fc ** 2).sum()

    val = norm_of_offsets(z)
    grad = torch.autograd.grad(val, z)[0]
    h = 1e-4
    for slot, dim in [(0, 0), (2, 3)]:
        zp = z.detach().clone()
        zp[slot, dim] += h
        zm = z.detach().clone()
        zm[slot, dim] -= h
        fd = (norm_of_offsets(zp) - norm_of_offsets(zm)).item() / (2 * h)
        assert abs(fd) > 1e-10, "perturbed head should produce nonzero offsets"
        rel = abs(fd - grad[slot, dim].item()) / max(abs(fd), 1e-10)
        assert rel < 1e-3


# ---------------------------------------------------------------------------
# canonical spaces


def test_stage_maps_are_additive():
    x = torch.randn(20, 3)
    zero = torch.zeros(20, 3)
    assert torch.equal(to_subject_canonical(x, zero), x)
    o1, o2 = torch.randn(20, 3), torch.randn(20, 3)
    x_sc = to_subject_canonical(x, o1)
    x_fc = to_flame_canonical(x_sc, o2)
    assert torch.allclose(x_fc - x, o1 + o2, atol=1e-6)
    oracle = x.numpy() + o1.numpy()
    assert np.allclose(x_sc.numpy(), oracle)


def test_canonical_field_ranges(model):
    z = model.latent.compose()
    out = model.canonical_forward(z, torch.randn(50, 3))
    assert out.albedo.min() > 0 and out.albedo.max() < 1
    assert out.seg_cue.min() > 0 and out.seg_cue.max() < 1
    again = model.canonical_forward(z, torch.randn(0, 3) if False else model.points)
    same = model.canonical_forward(z, model.points)
    assert torch.equal(again.sdf, same.sdf)


def test_canonical_sdf_gradient_matches_fd(model):
    m = _as_double(model)
    z = m.latent.compose().detach()
    pts = torch.randn(5, 3, dtype=torch.float64)

    def sdf_at(p):
        return m.canonical_forward(z, p).sdf

    p = pts.clone().requires_grad_(True)
    grad = torch.autograd.grad(sdf_at(p).sum(), p)[0]
    h = 1e-4
    for i in range(3):
        d = torch.zeros(1, 3, dtype=torch.float64)
        d[0, i] = h
        fd = (sdf_at(pts + d) - sdf_at(pts - d)) / (2 * h)
        rel = (fd - grad[:, i]).abs() / fd.abs().clamp_min(1e-8)
        assert rel.max() < 1e-3


class _LinearProbeField(torch.nn.Module):
    """Stand-in canonical net with an analytic SDF: sigma = x . u."""

    def __init__(self, u):
        super().__init__()
        self.u = u

    def forward(self, z, pts):
        return CanonicalFieldOutput(
            sdf=pts @ self.u,
            albedo=torch.full((pts.shape[0], 3), 0.5),
            seg_cue=torch.full((pts.shape[0],), 0.5),
        )


def test_canonical_normals_linear_field(model):
    u = torch.tensor([0.6, 0.0, 0.8])
    model.canon_net = _LinearProbeField(u)
    z = model.latent.compose()
    normals, degenerate = model.canonical_normals(z, torch.randn(20, 3))
    assert not degenerate.any()
    assert (normals - u).abs().max() < 1e-6


def test_canonical_normals_unit_and_fd_direction(model):
    z = model.latent.compose().detach()
    pts = torch.randn(30, 3) * 0.5
    normals, _ = model.canonical_normals(z, pts)
    assert ((normals.norm(dim=1) - 1.0).abs() < 1e-6).all()
    # central-difference gradient direction
    h = 1e-3
    fd = torch.zeros(30, 3)
    for i in range(3):
        d = torch.zeros(1, 3)
        d[0, i] = h
        fd[:, i] = (model.canonical_forward(z, pts + d).sdf - model.canonical_forward(z, pts - d).sdf) / (2 * h)
    fd = fd / fd.norm(dim=1, keepdim=True).clamp_min(1e-12)
    cos = (normals * fd).sum(dim=1)
    assert cos.min() > 1 - 1e-4


# ---------------------------------------------------------------------------
# normal deformation


def test_deform_normals_identity():
    n = torch.nn.functional.normalize(torch.randn(10, 3), dim=1)
    J = torch.eye(3).expand(10, 3, 3)
    out, flags = deform_normals(n, J)
    assert not flags.any()
    assert (out - n).abs().max() < 1e-6


def test_deform_normals_uniform_scale():
    n = torch.nn.functional.normalize(torch.randn(10, 3), dim=1)
    J = 3.7 * torch.eye(3).expand(10, 3, 3)
    out, _ = deform_normals(n, J)
    assert (out - n).abs().max() < 1e-6


def test_deform_normals_rotation_and_fd_oracle():
    # random smooth deformation f(x) = R x + a * sin-perturbation
    torch.manual_seed(3)
    R = rodrigues(torch.tensor([0.3, -0.4, 0.2]))
    amp = 0.1

    def f(x):
        return x @ R.T + amp * torch.sin(x[:, [1, 2, 0]])

    x = torch.randn(50, 3)
    n_c = torch.nn.functional.normalize(torch.randn(50, 3), dim=1)
    # analytic-free FD Jacobian oracle
    h = 1e-4
    J_fd = torch.zeros(50, 3, 3)
    for c in range(3):
        d = torch.zeros(1, 3)
        d[0, c] = h
        J_fd[:, :, c] = (f(x + d) - f(x - d)) / (2 * h)
    xg = x.clone().requires_grad_(True)
    y = f(xg)
    J = torch.stack([
        torch.autograd.grad(y[:, c].sum(), xg, retain_graph=True)[0] for c in range(3)
    ], dim=1)
    out, _ = deform_normals(n_c, J)
    oracle, _ = deform_normals(n_c, J_fd)
    cos = (out * oracle).sum(dim=1)
    assert cos.min() > 1 - 1e-5


def test_deform_normals_singular_passthrough():
    n = torch.tensor([[0.0, 1.0, 0.0]])
    J = torch.zeros(1, 3, 3)
    out, flags = deform_normals(n, J)
    assert bool(flags[0])
    assert torch.equal(out, n)


# ---------------------------------------------------------------------------
# full forward chain


def test_avatar_identity_chain(model):
    model.eval()
    z = model.latent.compose()
    params = FlameParams.zeros(model.template)
    out = model(z, params, frame_idx=None)
    assert (out["positions"] - model.points).abs().max() < 1e-7
    assert (out["color"] - out["albedo"]).abs().max() < 1e-7


def test_avatar_global_rotation(model):
    model.eval()
    z = model.latent.compose()
    theta = torch.zeros(3 * (model.template.n_joints + 1))
    theta[:3] = torch.tensor([0.2, 0.5, -0.1])
    params = FlameParams.zeros(model.template).replace(theta=theta)
    out = model(z, params)
    R = rodrigues(theta[:3])
    assert (out["positions"] - model.points @ R.T).abs().max() < 1e-5
    base = model(z, FlameParams.zeros(model.template))
    rotated = base["normal"] @ R.T
    cos = (rotated * out["normal"]).sum(dim=1)
    assert cos.min() > 1 - 1e-4


def test_avatar_forward_matches_scripted_composition(model, template):
    _randomize_heads(model, scale=0.1)
    model.eval()
    rng = np.random.default_rng(9)
    z = torch.tensor(rng.normal(size=(len(PARTS) + 1, 8)), dtype=torch.float32)
    params = FlameParams(
        beta=rng.normal(size=template.n_beta) * 0.3,
        theta=rng.normal(size=3 * (template.n_joints + 1)) * 0.3,
        psi=rng.normal(size=template.n_psi) * 0.3,
        translation=rng.normal(size=3) * 0.5,
    )
    pts = torch.tensor(rng.normal(size=(50, 3)) * 0.4, dtype=torch.float32)
    out = model(z, params, points=pts)

    from avatargen.mini_flame import PointBases, apply_blendshapes, lbs, regress_joints

    d = model.deformation_forward(z, pts)
    x_sc = pts + d.offset_gc_sc
    x_fc = x_sc + d.offset_sc_fc
    idx = nearest_vertex(x_fc, template.vertices)
    bases = PointBases(template.shape_basis[idx], d.expr_basis_pt, d.pose_basis_pt)
    x_dm = apply_blendshapes(x_fc, template, params, bases)
    v_shaped = template.vertices \
        + torch.einsum("vck,k->vc", template.shape_basis, params.beta) \
        + torch.einsum("vck,k->vc", template.expr_basis, params.psi)
    joints = regress_joints(template, v_shaped)
    expected = lbs(x_dm, joints, params.theta, d.skin_weights_pt, template.parents) + params.translation
    assert (out["positions"] - expected).abs().max() < 1e-6


def test_avatar_eq3_consistency(model):
    # deformed normals match the finite-difference Jacobian route
    _randomize_heads(model, scale=0.2)
    model.eval()
    z = model.latent.compose().detach()
    rng = np.random.default_rng(11)
    params = FlameParams(
        beta=rng.normal(size=model.template.n_beta) * 0.3,
        theta=rng.normal(size=3 * (model.template.n_joints + 1)) * 0.4,
        psi=rng.normal(size=model.template.n_psi) * 0.3,
        translation=[0.0, 0.0, 0.0],
    )
    pts = torch.tensor(rng.normal(size=(100, 3)) * 0.4, dtype=torch.float32)
    out = model(z, params, points=pts)
    d = out["deformation"]
    x_sc0 = out["x_sc"].detach()
    n_sc, _ = model.canonical_normals(z, x_sc0)

    def repose(x_sc):
        x_fc = x_sc + d.offset_sc_fc.detach()
        return model.pose_from_flame_canonical(x_fc, d, params)

    h = 1e-4
    J_fd = torch.zeros(100, 3, 3)
    for c in range(3):
        delta = torch.zeros(1, 3)
        delta[0, c] = h
        J_fd[:, :, c] = (repose(x_sc0 + delta) - repose(x_sc0 - delta)).detach() / (2 * h)
    oracle, _ = deform_normals(n_sc, J_fd)
    cos = (out["normal"] * oracle).sum(dim=1)
    assert cos.min() > 1 - 1e-5


def test_avatar_gradients_match_fd(model):
    m = _as_double(_randomize_heads(model, scale=0.1))
    m.train()
    z0 = m.latent.compose().detach()
    params = FlameParams.zeros(m.template).replace(
        theta=torch.cat([torch.tensor([0.1, 0.2, 0.0]), torch.zeros(3 * m.template.n_joints)])
    ).astype(torch.float64)
    pts0 = m.points.detach()[:16].clone()

    def objective(z, pts):
        out = m(z, params, points=pts, with_normals=True, create_graph=True)
        return (out["positions"] ** 2).sum()

    z = z0.clone().requires_grad_(True)
    pts = pts0.clone().requires_grad_(True)
    val = objective(z, pts)
    gz, gp = torch.autograd.grad(val, (z, pts))
    h = 1e-3
    checks = [("z", z0, gz, (0, 1)), ("z", z0, gz, (3, 5)),
              ("pts", pts0, gp, (2, 0)), ("pts", pts0, gp, (7, 2))]
    for kind, base, grad, (i, j) in checks:
        plus = base.clone()
        plus[i, j] += h
        minus = base.clone()
        minus[i, j] -= h
        if kind == "z":
            fd = (objective(plus, pts0) - objective(minus, pts0)).item() / (2 * h)
        else:
            fd = (objective(z0, plus) - objective(z0, minus)).item() / (2 * h)
        rel = abs(fd - grad[i, j].item()) / max(abs(fd), 1e-8)
        assert rel < 1e-3, (kind, i, j, fd, grad[i, j].item())


# ---------------------------------------------------------------------------
# upsampling


def test_upsample_arithmetic(model):
    ps = model.point_set
    assert ps.n == 40
    up = upsample_points(ps, 2.0, noise_scale=0.1, radius_decay=0.5)
    assert up.n == 80
    assert up.radius == pytest.approx(ps.radius * 0.5)


def test_upsample_zero_noise_duplicates(model):
    ps = model.point_set
    up = upsample_points(ps, 2.0, noise_scale=0.0, radius_decay=0.75)
    assert torch.equal(up.positions[:40], ps.positions)
    assert torch.equal(up.positions[40:], ps.positions)


def test_upsample_ceil():
    from avatargen.model import init_point_cloud

    ps = init_point_cloud(1600, 0.02)
    up = upsample_points(ps, 1.5, noise_scale=0.1)
    assert up.n == 2400


def test_upsample_requires_growth(model):
    with pytest.raises(ParameterError):
        upsample_points(model.point_set, 1.0, 0.1)


def test_nearest_vertex_tie_breaks_low_index():
    verts = torch.tensor([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    idx = nearest_vertex(torch.tensor([[0.0, 0.0, 0.0]]), verts)
    assert idx[0].item() == 0
