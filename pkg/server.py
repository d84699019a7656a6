"""
HTTP job service: submit harness experiments, poll their status and
download the result files.
"""

import logging
import os
import shutil
import uuid
from typing import Any, Dict

import pandas as pd
from fastapi import BackgroundTasks, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse

from errors import NormLabError
from experiments import COMMANDS, load_spec, plan_runs, run_experiment
from models import JobResponse, JobStatus
from utils import ensure_directories

logger = logging.getLogger(__name__)

JOBS_ROOT = os.environ.get("NORMLAB_JOBS_DIR", "output")

app = FastAPI(
    title="Normalization Lab",
    description="API for running normalization scheme experiments and downloading their CSV results",
    version="1.0.0"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

ensure_directories(JOBS_ROOT)


def _checked_job_id(job_id: str) -> str:
    """Job ids are the UUIDs handed out on submit; anything else is not a job."""
    try:
        canonical = str(uuid.UUID(job_id))
    except ValueError:
        raise HTTPException(status_code=404, detail="Job not found")
    if canonical != job_id:
        raise HTTPException(status_code=404, detail="Job not found")
    return canonical


def _job_dir(job_id: str) -> str:
    return os.path.join(JOBS_ROOT, _checked_job_id(job_id))


def _status_file(job_id: str) -> str:
    return os.path.join(JOBS_ROOT, f"job_{_checked_job_id(job_id)}_status.json")


def _write_status(status: JobStatus):
    pd.DataFrame([status.model_dump()]).to_json(_status_file(status.job_id), orient="records")


@app.post("/experiments/{command}", response_model=JobResponse)
async def submit_experiment(command: str, body: Dict[str, Any], background_tasks: BackgroundTasks):
    """
    Validate an experiment and run it in the background.
    Results go to <jobs dir>/<job_id>/.
    """
    if command not in COMMANDS:
        raise HTTPException(status_code=404, detail=f"Unknown command {command}")

    job_id = str(uuid.uuid4())
    try:
        spec = load_spec(None, **{**body, "command": command, "out": _job_dir(job_id)})
        plan_runs(spec, command)
    except NormLabError as e:
        raise HTTPException(status_code=400, detail=str(e))

    _write_status(JobStatus(job_id=job_id, command=command, status="processing"))
    background_tasks.add_task(process_experiment, job_id, spec, command)
    return JobResponse(status="processing", job_id=job_id,
                       message=f"Running {command} in the background")


def process_experiment(job_id: str, spec, command: str):
    """Run the experiment and keep the status file current."""
    status = JobStatus(job_id=job_id, command=command, status="processing")
    try:
        files = run_experiment(spec, command)
        status.status = "completed"
        status.files = [os.path.basename(path) for path in files]
    except Exception as e:
        logger.exception("Job %s failed", job_id)
        status.status = "failed"
        status.error = str(e)
    finally:
        _write_status(status)


@app.get("/jobs/{job_id}", response_model=JobStatus)
async def get_job_status(job_id: str):
    """
    Check the status of an experiment job.
    """
    status_file = _status_file(job_id)
    if not os.path.exists(status_file):
        raise HTTPException(status_code=404, detail="Job not found")

    try:
        record = pd.read_json(status_file, orient="records", dtype=False).to_dict(orient="records")[0]
        record["files"] = record.get("files") or []
        if not isinstance(record.get("error"), str):
            record["error"] = None
        return JobStatus(**record)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error checking job status: {str(e)}")


@app.get("/download/{job_id}/{filename}")
async def download_file(job_id: str, filename: str):
    """
    Download a result file of a job.
    """
    file_path = os.path.join(_job_dir(job_id), os.path.basename(filename))
    if not os.path.isfile(file_path):
        raise HTTPException(status_code=404, detail="File not found")

    media_type = "application/json" if filename.endswith(".json") else "text/csv"
    return FileResponse(
        file_path,
        media_type=media_type,
        filename=filename,
        headers={"Content-Disposition": f"attachment; filename={filename}"}
    )


@app.delete("/cleanup/{job_id}")
async def cleanup_job(job_id: str):
    """
    Delete a job's results and status once they are no longer needed.
    """
    status_file = _status_file(job_id)
    if not os.path.exists(status_file):
        raise HTTPException(status_code=404, detail="Job not found")

    try:
        shutil.rmtree(_job_dir(job_id), ignore_errors=True)
        os.remove(status_file)
        return {"status": "success", "message": f"Job {job_id} deleted successfully"}
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error deleting job: {str(e)}")


if __name__ == "__main__":
    import uvicorn
    uvicorn.run("server:app", host="0.0.0.0", port=8000, reload=True)
