'''Two-stage reconstruction of a deforming garment from a monocular sequence.

The geometry stage optimizes a static per-face Jacobian field and a
pose-conditioned dynamic field; each step Poisson-solves the canonical mesh,
skins it into the frame's pose, renders it and backpropagates the image
losses through the whole chain. The base mesh is refined periodically where
the rendering gradients are largest. The appearance stage then fits a static
texture and a pose-conditioned dynamic texture on the final geometry.'''

from dataclasses import dataclass, field, fields, is_dataclass, asdict
import argparse
import datetime
import json
import logging
import math
import os

import numpy as np
import torch
import wandb
from tqdm import tqdm

import util
from util import ConfigError, as_tensor, check_keys
from dataset import GarmentDataset, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from evaluation import evaluate_run, mesh_metrics, psnr
from fields import (StaticField, DynamicFieldNet, PoseEncoder, UnitBox, pose_encode_fit,
                    eval_dynamic_field, combine, save_checkpoint, load_checkpoint)
from losses import (LossWeights, l_diffuse, l_normal, l_reg, l_depth, l_mask, l_geo, l_tex,
                    sample_depth_pairs)
from mesh import Mesh, face_geometry, read_obj, write_obj
from optim import AdamHyper, AdamState, GroupedAdam
from poisson import assemble, poisson_solve
from remesh import (RemeshConfig, GradientAccumulator, RemeshAudit, select_faces, edge_priority,
                    remesh, transfer_attributes)
from render import (rasterize, vertex_normals, shade_diffuse, render_normals, render_depth,
                    soft_mask, render_textured, orbit_cameras, save_png)
from skinning import SkinWeights, skin
from texture import (uv_atlas, StaticTexture, DynamicTextureNet, PoseNoiseSchedule, visible_texels,
                     eval_dynamic_texture, combine_texture, anneal_pose_noise, export_texture)


# Loss growth factor and number of consecutive epochs that count as divergence.
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3

ENCODING_KEYS = ('type', 'n_levels', 'features_per_level', 'log2_table_size',
                 'base_resolution', 'growth', 'init_scale')
NETWORK_KEYS = ('encoding', 'hidden_dim', 'n_hidden')

# Stream ids mixed into the run seed.
FIELD_STREAM, TEXTURE_STREAM, DEPTH_STREAM, POSE_NOISE_STREAM = 1, 2, 3, 4


class DivergenceError(RuntimeError):
    'The geometry loss kept growing far above its initial value.'

    def __init__(self, message, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class ScheduleConfig:
    geometry_epochs: int = 300
    geometry_warmup: int = 60
    remesh_interval: int = 50
    noise_sigma: float = 0.01  # fraction of the bounding-box diagonal
    noise_tau: float = 50.0  # iterations
    appearance_epochs: int = 200
    appearance_warmup: int = 40
    pose_noise_sigma: float = 0.1
    pose_noise_span: int = 100
    print_every: int = 10


@dataclass
class OptimizerConfig:
    static_lr: float = 1e-3
    field_lr: float = 1e-3
    texture_lr: float = 1e-2
    texture_network_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def hyper(self, lr: float) -> AdamHyper:
        return AdamHyper(lr=lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass
class NetworkConfig:
    pose_components: int = 8
    field_net: dict = field(default_factory=lambda: {'hidden_dim': 64, 'n_hidden': 3})
    texture_net: dict = field(default_factory=lambda: {'hidden_dim': 64, 'n_hidden': 2})

    def __post_init__(self):
        for name in ('field_net', 'texture_net'):
            section = getattr(self, name)
            check_keys(section, NETWORK_KEYS, f'network.{name}')
            check_keys(section.get('encoding', {}), ENCODING_KEYS, f'network.{name}.encoding')


@dataclass
class RenderConfig:
    mask_sigma: float = 1.0  # pixels
    novel_views: int = 4


@dataclass
class TextureConfig:
    resolution: int = 512
    init: float = 0.5


@dataclass
class RunConfig:
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    remesh: RemeshConfig = field(default_factory=RemeshConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    texture: TextureConfig = field(default_factory=TextureConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    seed: int = 0
    wandb_project: str = 'garment-reconstruction'
    wandb_mode: str = 'disabled'
    serial: bool = True

    def __post_init__(self):
        s = self.schedule
        if s.geometry_warmup > s.geometry_epochs or s.geometry_warmup < 0:
            raise ConfigError('schedule.geometry_warmup must lie in [0, schedule.geometry_epochs]')
        if s.appearance_warmup > s.appearance_epochs or s.appearance_warmup < 0:
            raise ConfigError('schedule.appearance_warmup must lie in [0, schedule.appearance_epochs]')
        if s.remesh_interval < 1:
            raise ConfigError('schedule.remesh_interval must be >= 1')
        if s.noise_sigma < 0 or s.pose_noise_sigma < 0:
            raise ConfigError('noise levels must be nonnegative')
        if self.render.mask_sigma <= 0:
            raise ConfigError('render.mask_sigma must be positive')
        if not self.serial:
            raise ConfigError('only serial execution is supported (serial must be true)')


def _build(cls, data: dict, path: str = ''):
    check_keys(data, [f.name for f in fields(cls)], path)
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if is_dataclass(f.default_factory):
            if not isinstance(value, dict):
                raise ConfigError(f'{path + "." if path else ""}{f.name} must be an object')
            value = _build(f.default_factory, value, f'{path + "." if path else ""}{f.name}')
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f'invalid configuration {path or "(root)"}: {e}')


def load_config(path_or_json) -> RunConfig:
    'Parses a run configuration from inline JSON or a JSON file.'
    if isinstance(path_or_json, dict):
        data = path_or_json
    else:
        try:
            data = json.loads(path_or_json)
        except json.decoder.JSONDecodeError:
            with open(path_or_json) as f:
                data = json.load(f)
    return _build(RunConfig, data)


def noise_sigma(iteration: int, sigma0: float, tau: float) -> float:
    return sigma0 * math.exp(-iteration / tau) if tau > 0 else 0.0


def vertex_noise(positions: torch.Tensor, iteration: int, sigma0: float, tau: float, seed: int) -> torch.Tensor:
    '''Adds N(0, sigma(k)^2) per coordinate with sigma(k) = sigma0 exp(-k / tau).
    The noise is a constant offset, so gradients pass through unchanged.'''
    if sigma0 < 0:
        raise ValueError('the vertex noise level must be nonnegative')
    sigma = noise_sigma(iteration, sigma0, tau)
    if sigma == 0:
        return positions
    noise = torch.randn(positions.shape, dtype=positions.dtype, generator=util.torch_generator(seed, iteration))
    return positions + sigma * noise


def fit_pose_encoder(poses, k: int) -> PoseEncoder:
    poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
    if len(poses) < 2:
        logging.info('Single frame: the pose code is empty')
        return PoseEncoder(basis=np.zeros((poses.shape[1], 0)), mean=poses.mean(axis=0))
    return pose_encode_fit(poses, k)


class RunLog:
    'Per-epoch JSON lines in <out>/log.jsonl, mirrored to wandb.'

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, 'log.jsonl')

    def write(self, record: dict):
        with open(self.path, 'a') as f:
            f.write(json.dumps(record, sort_keys=True) + '\n')
        wandb.log({k: v for k, v in record.items() if isinstance(v, (int, float))})


def _start_wandb(config: RunConfig, stage: str):
    wandb.init(project=config.wandb_project, mode=config.wandb_mode, name=f'{stage}-{config.seed}',
               config=asdict(config), reinit=True)


@dataclass
class GeometryResult:
    base: Mesh
    static_jacobians: np.ndarray
    pose_encoder: PoseEncoder
    weights: SkinWeights
    canonical: list
    posed: list
    net: DynamicFieldNet = None
    history: list = field(default_factory=list)
    metrics: dict = None


class GeometryModel:
    'The base mesh with its Poisson system, fields and skinning weights.'

    def __init__(self, config: RunConfig, dataset: GarmentDataset):
        self.config = config
        self.skeleton = dataset.skeleton
        self.base = dataset.template
        self.weights = dataset.weights
        self.system = assemble(self.base)
        self.static = StaticField(self.base.n_faces)
        self.pose_encoder = fit_pose_encoder(dataset.poses, config.network.pose_components)
        self.net = DynamicFieldNet(config.network.field_net, self.pose_encoder.k,
                                   util.torch_generator(config.seed, FIELD_STREAM))
        # Fixed for the whole stage, so that remeshing does not move the encoder inputs.
        self.box = UnitBox.around(self.base.vertices)

    def conditioning(self, pose):
        'Face centers (normalized) and normals of the posed static mesh.'
        with torch.no_grad():
            static = poisson_solve(self.system, self.static.jacobians)
            posed = skin(static, self.skeleton, pose, self.weights)
            centers, normals, _ = face_geometry(self.base, posed)
        return self.box.normalize(centers), normals

    def jacobians(self, pose, dynamic: bool):
        if not dynamic:
            return self.static.jacobians
        centers, normals = self.conditioning(pose)
        offsets = eval_dynamic_field(self.net, centers, normals, self.pose_encoder.encode(pose))
        return combine(self.static.jacobians, offsets)

    def pose_frame(self, pose, dynamic: bool):
        'Returns (Jacobians, canonical positions, posed positions).'
        jacobians = self.jacobians(pose, dynamic)
        canonical = poisson_solve(self.system, jacobians)
        return jacobians, canonical, skin(canonical, self.skeleton, pose, self.weights)

    def refine(self, acc: GradientAccumulator, epoch: int, optimizer: GroupedAdam, audit: RemeshAudit):
        '''One remeshing pass; carries J^S, its Adam moments and the skinning
        weights over to the new topology.'''
        rc = self.config.remesh
        f_omega, f_delta = select_faces(self.base, acc, rc, epoch)
        selected = np.unique(self.base.face_edges[f_delta])
        result = remesh(self.base, selected, rc.merge_epsilon, rc.max_splits,
                        priority=edge_priority(self.base, acc)[selected])

        if result.mesh is not self.base:
            state = optimizer.states['static'][0]
            n = self.base.n_faces
            face_attrs = {'J': self.static.jacobians.detach().numpy().reshape(n, 9),
                          'm1': state.m1.numpy().reshape(n, 9),
                          'm2': state.m2.numpy().reshape(n, 9)}
            faces, vertices = transfer_attributes(self.base, result.mesh, face_attrs,
                                                  {'W': self.weights.W}, k=rc.k)
            m = result.mesh.n_faces
            as_field = lambda name: as_tensor(faces[name].reshape(m, 3, 3))
            self.static.replace(as_field('J'))
            optimizer.rebind('static', [self.static.jacobians],
                             [AdamState(as_field('m1'), as_field('m2').clamp(min=0), state.step)])
            self.weights = SkinWeights(vertices['W'])
            self.base = result.mesh
            self.system = assemble(self.base)

        audit.record(epoch=epoch, f_omega=len(f_omega), f_delta=len(f_delta), e_s=len(selected),
                     vertices=self.base.n_vertices, faces=self.base.n_faces, **result.stats)
        acc.reset(self.base.n_faces)
        logging.info(f'Remesh pass at epoch {epoch}: {result.stats}, now {self.base}')


def _geometry_step(model: GeometryModel, frame, config: RunConfig, iteration: int, epoch: int,
                   dynamic: bool, acc: GradientAccumulator = None):
    'Forward pass for one frame. Returns (total loss, logged components).'
    weights, diag = config.loss, model.base.bbox_diagonal()
    jacobians, _, posed = model.pose_frame(frame.pose, dynamic)
    positions = vertex_noise(posed, iteration, config.schedule.noise_sigma * diag,
                             config.schedule.noise_tau, config.seed)
    faces, camera = model.base.faces, frame.camera
    fragments = rasterize(positions, faces, camera)
    mask_gt = as_tensor(frame.mask)

    normals = vertex_normals(positions, faces)
    if weights.supervision == 'diffuse':
        image = shade_diffuse(fragments, positions, faces, camera, normals)
        render_term = l_diffuse(image, as_tensor(frame.diffuse), mask_gt, weights)
    else:
        if frame.normals is None:
            raise ValueError(f'frame {frame.index} has no normal map for normal supervision')
        image = render_normals(fragments, positions, faces, camera, normals)
        render_term = l_normal(image, as_tensor(frame.normals), mask_gt)

    components = {'render': render_term, 'reg': l_reg(jacobians)}
    if weights.mask > 0:
        components['mask'] = l_mask(soft_mask(fragments, model.base, positions, camera,
                                              config.render.mask_sigma), mask_gt)
    if weights.depth > 0:
        pairs = sample_depth_pairs(frame.depth, frame.mask, weights.depth_pairs,
                                   util.numpy_rng(config.seed, DEPTH_STREAM, epoch, frame.index))
        components['depth'] = l_depth(render_depth(fragments, positions, faces, camera), pairs,
                                      weights.depth_margin * diag)

    if acc is not None:
        pixel_grads, = torch.autograd.grad(render_term, image, retain_graph=True)
        acc.accumulate(fragments, pixel_grads.numpy())

    total, contributions = l_geo(components, weights)
    contributions['render_raw'] = render_term.item()
    return total, contributions


def run_geometry(config: RunConfig, dataset: GarmentDataset, out_dir) -> GeometryResult:
    os.makedirs(out_dir, exist_ok=True)
    _start_wandb(config, 'geometry')
    schedule = config.schedule
    model = GeometryModel(config, dataset)

    optimizer = GroupedAdam()
    optimizer.add_group('static', [model.static.jacobians], config.optimizer.hyper(config.optimizer.static_lr))
    optimizer.add_group('dynamic', model.net.parameters(), config.optimizer.hyper(config.optimizer.field_lr),
                        enabled=False)

    remeshing = config.remesh.enabled and schedule.remesh_interval < schedule.geometry_epochs
    acc = GradientAccumulator(model.base.n_faces) if remeshing else None
    audit = RemeshAudit(os.path.join(out_dir, 'remesh.jsonl'))
    run_log = RunLog(out_dir)

    history, initial_loss, diverging = [], None, 0
    begin = datetime.datetime.now()
    n_frames = len(dataset)

    for epoch in tqdm(range(schedule.geometry_epochs), desc='geometry'):
        dynamic = epoch >= schedule.geometry_warmup
        optimizer.enable('dynamic', dynamic)
        totals, terms = [], {}

        for t, frame in enumerate(dataset.frames):
            iteration = epoch * n_frames + t
            optimizer.zero_grad()
            total, contributions = _geometry_step(model, frame, config, iteration, epoch, dynamic, acc)
            total.backward()
            optimizer.step()

            totals.append(total.item())
            for name, value in contributions.items():
                terms.setdefault(name, []).append(value)

        epoch_loss = float(np.mean(totals))
        record = {'stage': 'geometry', 'epoch': epoch, 'loss': epoch_loss,
                  'noise_sigma': noise_sigma(epoch * n_frames, schedule.noise_sigma * model.base.bbox_diagonal(),
                                             schedule.noise_tau),
                  'vertices': model.base.n_vertices, 'faces': model.base.n_faces,
                  **{f'l_{name}': float(np.mean(v)) for name, v in terms.items()}}
        run_log.write(record)
        history.append(record)

        initial_loss = epoch_loss if initial_loss is None else initial_loss
        diverging = diverging + 1 if epoch_loss > DIVERGENCE_FACTOR * initial_loss else 0
        if diverging >= DIVERGENCE_PATIENCE:
            raise DivergenceError(f'geometry loss diverged at epoch {epoch} '
                                  f'({epoch_loss:.4g} vs initial {initial_loss:.4g})',
                                  {'epoch': epoch, 'initial_loss': initial_loss, 'history': history[-5:]})

        if remeshing and (epoch + 1) % schedule.remesh_interval == 0 and epoch + 1 < schedule.geometry_epochs:
            model.refine(acc, epoch, optimizer, audit)

        if (epoch + 1) % schedule.print_every == 0:
            print(util.now(), 'Geometry epoch {}/{}: loss {:.6g} (ETA: {})'.format(
                epoch + 1, schedule.geometry_epochs, epoch_loss,
                util.format_eta(datetime.datetime.now() - begin, epoch + 1, schedule.geometry_epochs)))

    result = export_geometry(model, dataset, out_dir, optimizer, history)
    if dataset.gt_meshes is not None:
        result.metrics = report_geometry(result, dataset, run_log, config.seed)
    return result


def export_geometry(model: GeometryModel, dataset: GarmentDataset, out_dir, optimizer, history) -> GeometryResult:
    'Writes the noise-free per-frame meshes, the final base mesh and the checkpoint.'
    for sub in ('meshes', 'canonical'):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    dynamic = model.config.schedule.geometry_warmup < model.config.schedule.geometry_epochs

    canonical, posed = [], []
    with torch.no_grad():
        for frame in dataset.frames:
            _, c, p = model.pose_frame(frame.pose, dynamic)
            canonical.append(c.numpy())
            posed.append(p.numpy())
            write_obj(os.path.join(out_dir, 'canonical', f'{frame.index:04d}.obj'), model.base, canonical[-1])
            write_obj(os.path.join(out_dir, 'meshes', f'{frame.index:04d}.obj'), model.base, posed[-1])
    write_obj(os.path.join(out_dir, 'base_remeshed.obj'), model.base)

    save_checkpoint(os.path.join(out_dir, 'checkpoint_geometry.pt'), model.static, model.net, model.pose_encoder,
                    {'base_vertices': as_tensor(model.base.vertices),
                     'base_faces': as_tensor(model.base.faces),
                     'skin_weights': as_tensor(model.weights.W),
                     'optimizer': optimizer.state_dict(),
                     'dynamic': dynamic})
    print(util.now(), f'Wrote geometry for {len(dataset)} frames to {out_dir} ({model.base})')
    return GeometryResult(model.base, model.static.jacobians.detach().numpy().copy(), model.pose_encoder,
                          model.weights, canonical, posed, model.net, history)


def report_geometry(result: GeometryResult, dataset: GarmentDataset, run_log: RunLog, seed: int) -> dict:
    '''Mean Chamfer distance and normal consistency against the ground-truth
    meshes, for the fitted sequence and for the skinned template it started from.'''
    per_frame = [mesh_metrics(Mesh(p, result.base.faces), gt, seed=seed, gt_band=dataset.band)
                 for p, gt in zip(result.posed, dataset.gt_meshes)]
    summary = {k: float(np.mean([m[k] for m in per_frame if k in m])) for k in per_frame[0]}
    with torch.no_grad():
        initial = [mesh_metrics(Mesh(skin(dataset.template.vertices, dataset.skeleton, frame.pose,
                                          dataset.weights).numpy(), dataset.template.faces), gt, seed=seed)
                   for frame, gt in zip(dataset.frames, dataset.gt_meshes)]
    for k in ('chamfer', 'normal_consistency'):
        summary[f'initial_{k}'] = float(np.mean([m[k] for m in initial]))
    run_log.write({'stage': 'geometry', 'final': True, **summary})
    print(util.now(), 'Geometry metrics:', ', '.join(f'{k} = {v:.6g}' for k, v in summary.items()))
    return summary


def load_geometry(out_dir, dataset: GarmentDataset) -> GeometryResult:
    'Reads the outputs of a finished geometry stage.'
    path = os.path.join(out_dir, 'base_remeshed.obj')
    if not os.path.exists(path):
        raise FileNotFoundError(f'{path} not found; run the geometry stage first')
    base = read_obj(path)
    state = load_checkpoint(os.path.join(out_dir, 'checkpoint_geometry.pt'))
    posed = [read_obj(os.path.join(out_dir, 'meshes', f'{f.index:04d}.obj')).vertices for f in dataset.frames]
    canonical = [read_obj(os.path.join(out_dir, 'canonical', f'{f.index:04d}.obj')).vertices
                 for f in dataset.frames]
    return GeometryResult(base, state['static'].numpy(), state['pose_encoder'],
                          SkinWeights(state['skin_weights'].numpy()), canonical, posed)


@dataclass
class AppearanceResult:
    atlas: object
    static_texture: np.ndarray
    textures: list
    renders: list
    history: list = field(default_factory=list)


def run_appearance(config: RunConfig, dataset: GarmentDataset, geometry: GeometryResult, out_dir) -> AppearanceResult:
    os.makedirs(out_dir, exist_ok=True)
    _start_wandb(config, 'appearance')
    schedule, q = config.schedule, config.texture.resolution
    base = geometry.base
    atlas = uv_atlas(base, q)
    faces = base.faces

    fragments = [rasterize(p, faces, f.camera) for p, f in zip(geometry.posed, dataset.frames)]
    texels = [visible_texels(atlas, frag) for frag in fragments]
    codes = [geometry.pose_encoder.encode(f.pose) for f in dataset.frames]

    static = StaticTexture(q, config.texture.init)
    net = DynamicTextureNet(config.network.texture_net, geometry.pose_encoder.k,
                            util.torch_generator(config.seed, TEXTURE_STREAM))
    optimizer = GroupedAdam()
    optimizer.add_group('texture', [static.texels], config.optimizer.hyper(config.optimizer.texture_lr))
    optimizer.add_group('texture_dynamic', net.parameters(),
                        config.optimizer.hyper(config.optimizer.texture_network_lr), enabled=False)

    noise = PoseNoiseSchedule(schedule.pose_noise_sigma, schedule.pose_noise_span)
    run_log = RunLog(out_dir)
    history = []
    begin = datetime.datetime.now()

    def render_frame(t, texture_map):
        frame = dataset.frames[t]
        return render_textured(fragments[t], geometry.posed[t], faces, atlas.uvs, texture_map, frame.camera)

    for epoch in tqdm(range(schedule.appearance_epochs), desc='appearance'):
        dynamic = epoch >= schedule.appearance_warmup
        optimizer.enable('texture_dynamic', dynamic)
        losses, scores = [], []

        for t, frame in enumerate(dataset.frames):
            optimizer.zero_grad()
            texture_map = static.texels
            if dynamic:
                code = anneal_pose_noise(codes[t], epoch, noise,
                                         util.torch_generator(config.seed, POSE_NOISE_STREAM, epoch, t))
                texture_map = combine_texture(texture_map, eval_dynamic_texture(net, q, code, texels[t]))
            color = render_frame(t, texture_map)
            loss = l_tex(color, as_tensor(frame.color), as_tensor(frame.mask), config.loss)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            scores.append(psnr(color.detach().numpy(), frame.color, frame.mask))

        record = {'stage': 'appearance', 'epoch': epoch, 'l_tex': float(np.mean(losses)),
                  'psnr': float(np.mean(scores))}
        run_log.write(record)
        history.append(record)
        if (epoch + 1) % schedule.print_every == 0:
            print(util.now(), 'Appearance epoch {}/{}: l_tex {:.6g}, PSNR {:.2f} (ETA: {})'.format(
                epoch + 1, schedule.appearance_epochs, record['l_tex'], record['psnr'],
                util.format_eta(datetime.datetime.now() - begin, epoch + 1, schedule.appearance_epochs)))

    for sub in ('texture', 'renders', 'novel'):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    export_texture(static.texels, os.path.join(out_dir, 'texture_static'))
    write_obj(os.path.join(out_dir, 'base_textured.obj'), base.with_uvs(atlas.uvs))

    dynamic = schedule.appearance_warmup < schedule.appearance_epochs
    textures, renders = [], []
    with torch.no_grad():
        for t, frame in enumerate(dataset.frames):
            texture_map = static.texels
            if dynamic:
                texture_map = combine_texture(texture_map, eval_dynamic_texture(net, q, codes[t]))
            textures.append(texture_map.numpy().copy())
            renders.append(render_frame(t, texture_map).numpy())
            export_texture(texture_map, os.path.join(out_dir, 'texture', f'{frame.index:04d}'))
            save_png(os.path.join(out_dir, 'renders', f'{frame.index:04d}.png'), renders[-1])

    render_novel_views(base, geometry.posed, atlas, textures, dataset, config.render.novel_views,
                       os.path.join(out_dir, 'novel'))
    torch.save({'shapes': {'static': tuple(static.texels.shape), 'uvs': atlas.uvs.shape},
                'static': static.texels.detach().clone(), 'network': net.state_dict(),
                'uvs': as_tensor(atlas.uvs), 'optimizer': optimizer.state_dict()},
               os.path.join(out_dir, 'checkpoint_appearance.pt'))

    if history:
        print(util.now(), f'Appearance done: l_tex {history[-1]["l_tex"]:.6g}, PSNR {history[-1]["psnr"]:.2f}')
    return AppearanceResult(atlas, static.texels.detach().numpy().copy(), textures, renders, history)


def render_novel_views(base: Mesh, posed, atlas, textures, dataset: GarmentDataset, n_views: int, out_dir):
    'Renders every frame from cameras orbiting the garment; writes NNNN_VV.png.'
    images = []
    for t, frame in enumerate(dataset.frames):
        center = np.asarray(posed[t]).mean(axis=0)
        for v, camera in enumerate(orbit_cameras(frame.camera, center, n_views)):
            fragments = rasterize(posed[t], base.faces, camera)
            with torch.no_grad():
                image = render_textured(fragments, posed[t], base.faces, atlas.uvs,
                                        as_tensor(textures[t]), camera).numpy()
            save_png(os.path.join(out_dir, f'{frame.index:04d}_{v:02d}.png'), image)
            images.append(image)
    return images


if __name__ == '__main__':
    parser = argparse.ArgumentParser('Reconstruct garment geometry and appearance from image sequences')
    parser.add_argument('command', choices=['geometry', 'appearance', 'synth', 'metrics'])
    parser.add_argument('--config', help='Path to config file, or inline JSON.', default='{}')
    parser.add_argument('--data', help='Dataset directory.')
    parser.add_argument('--out', help='Output directory.')
    parser.add_argument('--seed', type=int, default=None, help='Seed for the synthetic generator.')
    parser.add_argument('--pred', help='Output directory of a reconstruction (metrics).')
    parser.add_argument('--gt', help='Synthetic dataset directory with ground truth (metrics).')
    parser.add_argument('--debug', help='Enable debug messages.', action='store_true')

    opt = parser.parse_args()

    FORMAT = '%(asctime)-15s %(message)s'
    logging.basicConfig(format=FORMAT)

    if opt.debug:
        logging.getLogger().setLevel(logging.INFO)

    config = load_config(opt.config)
    util.seed_everything(config.seed)

    if opt.command == 'geometry':
        run_geometry(config, load_dataset(opt.data), opt.out)
    elif opt.command == 'appearance':
        dataset = load_dataset(opt.data)
        run_appearance(config, dataset, load_geometry(opt.out, dataset), opt.out)
    elif opt.command == 'synth':
        seed = config.seed if opt.seed is None else opt.seed
        save_dataset(generate_synthetic(config.synthetic, seed), opt.out)
    elif opt.command == 'metrics':
        evaluate_run(opt.pred, opt.gt)
