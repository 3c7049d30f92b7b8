"""
Run ledger: an SQLite sidecar next to the run outputs recording each
command invocation and its per-epoch metrics. Timestamps live only here.

Ledger writes never fail a command: errors are logged and the functions
return None (or an empty list).
"""

import json
import logging
import os
import sqlite3
import uuid
from datetime import datetime

logger = logging.getLogger(__name__)

LEDGER_FILE = "run_ledger.db"


def ledger_path(out_dir):
    return os.path.join(out_dir, LEDGER_FILE)


def init_ledger(out_dir):
    """Create the ledger database and its tables; returns the path or None"""
    path = ledger_path(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
        conn = sqlite3.connect(path)
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_uuid TEXT UNIQUE NOT NULL,
                command TEXT NOT NULL,  -- 'gen-data', 'train-zoo', ...
                seed INTEGER NOT NULL,
                config_json TEXT NOT NULL,
                status TEXT NOT NULL DEFAULT 'RUNNING',  -- 'RUNNING', 'OK', 'FAILED'
                exit_code INTEGER,
                message TEXT,
                started_at TEXT NOT NULL,
                finished_at TEXT
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS epoch_metrics (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_uuid TEXT NOT NULL,
                phase TEXT NOT NULL,  -- 'zoo' or 'mux'
                model_id TEXT NOT NULL,
                epoch INTEGER NOT NULL,
                loss REAL,
                accuracy REAL,
                recorded_at TEXT NOT NULL
            )
        ''')

        conn.commit()
        conn.close()
        return path

    except Exception as e:
        logger.warning("could not initialise run ledger at %s: %s", path, e)
        return None


def start_run(out_dir, command, seed, config):
    """
    Record the start of a command.

    Returns:
        str: run UUID or None if the ledger is unavailable
    """
    try:
        conn = sqlite3.connect(ledger_path(out_dir))
        cursor = conn.cursor()

        run_uuid = str(uuid.uuid4())
        cursor.execute('''
            INSERT INTO runs (run_uuid, command, seed, config_json, status, started_at)
            VALUES (?, ?, ?, ?, 'RUNNING', ?)
        ''', (run_uuid, command, int(seed), json.dumps(config, sort_keys=True), datetime.now().isoformat()))

        conn.commit()
        conn.close()
        return run_uuid

    except Exception as e:
        logger.warning("could not record run start: %s", e)
        return None


def record_epoch(out_dir, run_uuid, phase, model_id, epoch, loss, accuracy=None):
    if run_uuid is None:
        return None
    try:
        conn = sqlite3.connect(ledger_path(out_dir))
        cursor = conn.cursor()
        cursor.execute('''
            INSERT INTO epoch_metrics (run_uuid, phase, model_id, epoch, loss, accuracy, recorded_at)
            VALUES (?, ?, ?, ?, ?, ?, ?)
        ''', (run_uuid, phase, model_id, int(epoch), float(loss),
              None if accuracy is None else float(accuracy), datetime.now().isoformat()))
        conn.commit()
        conn.close()
        return True

    except Exception as e:
        logger.warning("could not record epoch %s of %s: %s", epoch, model_id, e)
        return None


def finish_run(out_dir, run_uuid, exit_code=0, message=None):
    """Mark a run OK (exit code 0) or FAILED"""
    if run_uuid is None:
        return None
    try:
        conn = sqlite3.connect(ledger_path(out_dir))
        cursor = conn.cursor()
        cursor.execute('''
            UPDATE runs SET status = ?, exit_code = ?, message = ?, finished_at = ?
            WHERE run_uuid = ?
        ''', ('OK' if exit_code == 0 else 'FAILED', int(exit_code), message,
              datetime.now().isoformat(), run_uuid))
        conn.commit()
        conn.close()
        return True

    except Exception as e:
        logger.warning("could not record run end: %s", e)
        return None


def get_runs(out_dir, command=None, status=None):
    """
    Runs in the ledger, newest first.

    Args:
        out_dir: run output directory
        command: filter by command name or None for all
        status: filter by 'RUNNING', 'OK', 'FAILED' or None for all

    Returns:
        list: run dictionaries
    """
    path = ledger_path(out_dir)
    if not os.path.exists(path):
        return []
    try:
        conn = sqlite3.connect(path)
        cursor = conn.cursor()

        query = 'SELECT * FROM runs WHERE 1 = 1'
        params = []
        if command:
            query += ' AND command = ?'
            params.append(command)
        if status:
            query += ' AND status = ?'
            params.append(status)
        query += ' ORDER BY id DESC'

        cursor.execute(query, params)
        columns = [desc[0] for desc in cursor.description]
        runs = [dict(zip(columns, row)) for row in cursor.fetchall()]
        conn.close()
        return runs

    except Exception as e:
        logger.warning("could not read runs: %s", e)
        return []


def get_epoch_metrics(out_dir, run_uuid=None, phase=None):
    path = ledger_path(out_dir)
    if not os.path.exists(path):
        return []
    try:
        conn = sqlite3.connect(path)
        cursor = conn.cursor()

        query = 'SELECT * FROM epoch_metrics WHERE 1 = 1'
        params = []
        if run_uuid:
            query += ' AND run_uuid = ?'
            params.append(run_uuid)
        if phase:
            query += ' AND phase = ?'
            params.append(phase)
        query += ' ORDER BY id'

        cursor.execute(query, params)
        columns = [desc[0] for desc in cursor.description]
        metrics = [dict(zip(columns, row)) for row in cursor.fetchall()]
        conn.close()
        return metrics

    except Exception as e:
        logger.warning("could not read epoch metrics: %s", e)
        return []
