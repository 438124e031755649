import io
import json
import logging
import pathlib
from collections import OrderedDict

import torch
from fastapi import APIRouter, FastAPI, File, Path, Request, UploadFile
from fastapi.responses import JSONResponse, Response

from .audio import compute_spectrogram, read_wav
from .conf import RunConfig, settings, validate_run_config
from .errors import AVSegError
from .model import AVSegModel, load_model
from .pipeline import prediction_source
from .segmentation import binarize
from .util import binary_png_bytes, get_device, load_rgb_png

logger = logging.getLogger(__name__)

router = APIRouter()
models: OrderedDict[str, tuple[float, RunConfig, AVSegModel]] = OrderedDict()


class NotFound(AVSegError):
    code = 'not_found'


class InvalidUpload(AVSegError):
    code = 'invalid_upload'


@router.get('/')
async def index():
    return {}


@router.get('/runs')
async def runs():
    root = settings.output_root
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / 'checkpoint.pt').exists())


def run_dir(name: str) -> pathlib.Path:
    path = settings.output_root / name
    if '/' in name or name.startswith('.') or not path.is_dir():
        raise NotFound(f'no run named {name!r}')
    return path


@router.get('/runs/{name}/metrics')
async def metrics(name: str = Path(...)):
    path = run_dir(name) / 'metrics.json'
    if not path.exists():
        raise NotFound(f'run {name!r} has not been evaluated')
    return json.loads(path.read_text())


def get_model(name: str) -> tuple[RunConfig, AVSegModel]:
    path = run_dir(name)
    ckpt = path / 'checkpoint.pt'
    if not ckpt.exists():
        models.pop(name, None)
        raise NotFound(f'run {name!r} has no checkpoint')
    mtime = ckpt.stat().st_mtime
    cached = models.get(name)
    if cached is None or cached[0] != mtime:
        cfg = validate_run_config(json.loads((path / 'config.json').read_text()))
        logger.info(f'Load model for run {name}')
        models[name] = (mtime, cfg, load_model(cfg, ckpt, get_device()))
    models.move_to_end(name)
    while len(models) > max(settings.model_cache_size, 1):
        evicted, _ = models.popitem(last=False)
        logger.info(f'Evict model for run {evicted}')
    return models[name][1], models[name][2]


@router.post('/runs/{name}/predict')
def predict(name: str = Path(...), image: UploadFile = File(...), audio: UploadFile = File(...)):
    cfg, model = get_model(name)
    try:
        pixels = load_rgb_png(io.BytesIO(image.file.read()))
    except OSError as e:
        raise InvalidUpload(f'cannot decode image: {e}')
    spec = compute_spectrogram(read_wav(io.BytesIO(audio.file.read())), cfg.audio)
    with torch.no_grad():
        device = next(model.parameters()).device
        out = model(pixels[None].to(device), spec.values[None].to(device))
        soft = out.heatmap(cfg.encoder.image_size) if prediction_source(cfg) == 'heatmap' else out.mask
    mask = binarize(soft[0].cpu(), cfg.metrics.threshold)
    return Response(content=binary_png_bytes(mask.numpy()), media_type='image/png')


async def avseg_error(request: Request, exc: AVSegError):
    status = 404 if isinstance(exc, NotFound) else 422
    return JSONResponse(status_code=status, content=json.loads(json.dumps(exc.to_json(), default=str)))


def create_app() -> FastAPI:
    app = FastAPI(title='avseg')
    app.include_router(router)
    app.add_exception_handler(AVSegError, avseg_error)
    return app
