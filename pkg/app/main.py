"""
Main FastAPI application for the A-RWKV Spectrogram Classifier
"""

import logging
import os
from datetime import datetime
from typing import List, Optional

import uvicorn
from dotenv import load_dotenv
from fastapi import FastAPI, File, HTTPException, Query, UploadFile, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app import __version__
from app.exceptions import ARWKVError, ConfigError
from app.models import (
    BatchPredictionResponse,
    ClassScore,
    ErrorResponse,
    HealthResponse,
    ModelInfoResponse,
    PredictionResponse,
)
from app.services.inference import get_model, predict_proba, top_k
from app.services.network import param_count
from app.services.spectrograms import read_melf
from app.utils.helpers import sanitize_filename, setup_logging

# Load environment variables
load_dotenv()
setup_logging()
logger = logging.getLogger(__name__)

MAX_UPLOAD_BYTES = int(os.getenv("MAX_UPLOAD_BYTES", str(64 * 1024 * 1024)))
MAX_BATCH = 64

# Initialize FastAPI app
app = FastAPI(
    title="A-RWKV Spectrogram Classifier",
    description="Linear-complexity audio spectrogram classification with bidirectional WKV7",
    version=__version__,
    docs_url="/docs",
    redoc_url="/redoc"
)

# CORS Configuration
allowed_origins = os.getenv("ALLOWED_ORIGINS", "http://localhost:3000").split(",")

app.add_middleware(
    CORSMiddleware,
    allow_origins=allowed_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.on_event("startup")
async def startup_event():
    """Load the checkpoint on startup when one is configured"""
    logger.info("🚀 Starting A-RWKV service %s", __version__)
    logger.info("🌐 Allowed Origins: %s", allowed_origins)
    if get_model(required=False) is None:
        logger.warning("⚠️ ARWKV_CHECKPOINT not set; prediction endpoints will return 503")
    else:
        logger.info("✅ Service is ready!")


@app.on_event("shutdown")
async def shutdown_event():
    logger.info("🛑 Shutting down A-RWKV service...")


def _now() -> str:
    return datetime.utcnow().isoformat()


def _error(status_code: int, error: str, detail: Optional[str] = None) -> JSONResponse:
    body = ErrorResponse(error=error, detail=detail, timestamp=_now())
    return JSONResponse(status_code=status_code, content=body.model_dump(exclude_none=True))


# Exception handlers
@app.exception_handler(HTTPException)
async def http_exception_handler(request, exc):
    """Handle HTTP exceptions"""
    return _error(exc.status_code, str(exc.detail))


@app.exception_handler(ARWKVError)
async def domain_exception_handler(request, exc):
    """Malformed spectrograms, shape mismatches and bad configuration are the caller's problem"""
    return _error(status.HTTP_400_BAD_REQUEST, type(exc).__name__, str(exc))


@app.exception_handler(Exception)
async def general_exception_handler(request, exc):
    """Handle general exceptions"""
    logger.exception("❌ Unhandled error")
    return _error(status.HTTP_500_INTERNAL_SERVER_ERROR, "Internal server error", str(exc))


def _require_model():
    model = get_model(required=False)
    if model is None:
        raise HTTPException(status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail="No model loaded")
    return model


async def _read_upload(file: UploadFile):
    content = await file.read()
    if len(content) > MAX_UPLOAD_BYTES:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"File size exceeds {MAX_UPLOAD_BYTES} bytes.",
        )
    return read_melf(content, sanitize_filename(file.filename or "upload"))


def _prediction(sample_id: str, scores) -> PredictionResponse:
    return PredictionResponse(
        success=True,
        sample_id=sample_id,
        top_classes=[ClassScore(index=i, probability=min(1.0, max(0.0, p))) for i, p in scores],
        predicted_at=_now(),
    )


# Routes
@app.get("/", response_model=HealthResponse)
async def root():
    """Root endpoint - health check"""
    return {
        "status": "healthy",
        "message": "A-RWKV service is running",
        "timestamp": _now(),
        "version": __version__,
        "model_loaded": get_model(required=False) is not None,
    }


@app.get("/health", response_model=HealthResponse)
async def health_check():
    """Detailed health check endpoint"""
    loaded = get_model(required=False) is not None
    return {
        "status": "healthy",
        "message": "All systems operational" if loaded else "No model loaded",
        "timestamp": _now(),
        "version": __version__,
        "model_loaded": loaded,
    }


@app.get("/model", response_model=ModelInfoResponse)
async def model_info():
    """Configuration and size of the served model"""
    model = _require_model()
    cfg = model.cfg
    return {
        "success": True,
        "config": cfg.model_dump(mode="json"),
        "param_count": param_count(cfg),
        "seq_len": cfg.seq_len,
        "grid": cfg.grid_shape,
    }


@app.post("/predict", response_model=PredictionResponse)
async def predict(file: UploadFile = File(...), k: int = Query(5, ge=1, le=100)):
    """
    Classify one MELF spectrogram

    Parameters:
    - file: MELF file [n_mels, n_frames]
    - k: Number of top classes to return
    """
    model = _require_model()
    spectrogram = await _read_upload(file)
    probs = predict_proba(model, [spectrogram])
    return _prediction(spectrogram.sample_id, top_k(probs, k)[0])


@app.post("/predict-batch", response_model=BatchPredictionResponse)
async def predict_batch(files: List[UploadFile] = File(...), k: int = Query(5, ge=1, le=100)):
    """
    Classify several same-sized MELF spectrograms in one forward pass
    """
    model = _require_model()
    if len(files) > MAX_BATCH:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"Maximum {MAX_BATCH} spectrograms allowed per batch",
        )
    spectrograms = [await _read_upload(f) for f in files]
    shapes = {s.data.shape for s in spectrograms}
    if len(shapes) > 1:
        raise ConfigError(f"batch spectrograms must share one shape, got {sorted(shapes)}", ["input_size"])
    probs = predict_proba(model, spectrograms)
    results = [_prediction(s.sample_id, scores) for s, scores in zip(spectrograms, top_k(probs, k))]
    return {"success": True, "results": results, "total_processed": len(results)}


def serve(host: str = None, port: int = None, reload: bool = None) -> None:
    host = host or os.getenv("HOST", "0.0.0.0")
    port = port or int(os.getenv("PORT", 8000))
    if reload is None:
        reload = os.getenv("RELOAD", "False").lower() == "true"
    uvicorn.run("app.main:app", host=host, port=port, reload=reload)


# For running directly
if __name__ == "__main__":
    serve()
