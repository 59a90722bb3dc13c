import os
import sqlite3
import sys
from datetime import datetime

import psutil

from sgseg import appdata_path

# Base de datos de las ejecuciones de la línea de comandos
RUNS_DB = os.path.join(appdata_path, "runs.db")


def create_runs_db(db_path=None):
    conn = sqlite3.connect(db_path or RUNS_DB)
    cursor = conn.cursor()
    cursor.execute(
        """
        CREATE TABLE IF NOT EXISTS runs (
            subcommand TEXT,
            config_hash TEXT,
            seed INTEGER,
            fecha_inicio DATETIME,
            fecha_fin DATETIME,
            exit_code INTEGER,
            peak_mb REAL
        )
        """
    )
    conn.commit()
    conn.close()


def peak_memory_mb():
    """Pico de memoria residente del proceso, en MB."""
    info = psutil.Process().memory_info()
    if hasattr(info, "peak_wset"):
        return info.peak_wset / (1024 * 1024)

    import resource

    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # ru_maxrss viene en bytes en macOS y en KB en Linux
    if sys.platform == "darwin":
        return peak / (1024 * 1024)
    return peak / 1024


def save_run_start(subcommand, config_hash, seed, db_path=None):
    create_runs_db(db_path)
    conn = sqlite3.connect(db_path or RUNS_DB)
    cursor = conn.cursor()
    cursor.execute(
        """
        INSERT INTO runs (subcommand, config_hash, seed, fecha_inicio)
        VALUES (?, ?, ?, ?)
        """,
        (subcommand, config_hash, seed, datetime.now()),
    )
    run_id = cursor.lastrowid
    conn.commit()
    conn.close()
    return run_id


def save_run_end(run_id, exit_code, db_path=None):
    conn = sqlite3.connect(db_path or RUNS_DB)
    cursor = conn.cursor()
    cursor.execute(
        """
        UPDATE runs
        SET fecha_fin = ?, exit_code = ?, peak_mb = ?
        WHERE rowid = ?
        """,
        (datetime.now(), exit_code, round(peak_memory_mb(), 1), run_id),
    )
    conn.commit()
    conn.close()


def _select_runs(where="", params=(), db_path=None):
    create_runs_db(db_path)
    conn = sqlite3.connect(db_path or RUNS_DB)
    cursor = conn.cursor()
    cursor.execute(
        """
        SELECT subcommand, config_hash, seed, fecha_inicio, fecha_fin, exit_code, peak_mb
        FROM runs
        {}
        ORDER BY fecha_inicio
        """.format(where),
        params,
    )
    runs = cursor.fetchall()
    conn.close()
    return runs


def list_runs(db_path=None):
    return _select_runs(db_path=db_path)


def _month_filter(month, year):
    return (
        "WHERE strftime('%m', fecha_inicio) = ? AND strftime('%Y', fecha_inicio) = ?",
        (f"{month:02}", str(year)),
    )


def list_runs_current_month(db_path=None, today=None):
    today = today or datetime.now()
    where, params = _month_filter(today.month, today.year)
    return _select_runs(where, params, db_path)


def list_runs_last_month(db_path=None, today=None):
    today = today or datetime.now()

    # Calcular el mes y año anterior
    if today.month == 1:
        past_month, past_year = 12, today.year - 1
    else:
        past_month, past_year = today.month - 1, today.year

    where, params = _month_filter(past_month, past_year)
    return _select_runs(where, params, db_path)


def format_table(headers, rows):
    """
    Tabla de texto plano: cabecera subrayada, columnas separadas por dos
    espacios, números alineados a la derecha.
    """
    cells = [[str(v) for v in headers]] + [[str(v) for v in row] for row in rows]
    widths = [max(map(len, column)) for column in zip(*cells)]
    numeric = [
        bool(rows) and all(isinstance(row[i], (int, float)) for row in rows)
        for i in range(len(headers))
    ]

    def line(values):
        return "  ".join(
            v.rjust(w) if right else v.ljust(w)
            for v, w, right in zip(values, widths, numeric)
        ).rstrip()

    underline = "  ".join("=" * w for w in widths)
    return "\n".join([line(cells[0]), underline] + [line(r) for r in cells[1:]])


def format_runs(runs):
    headers = ["Subcomando", "Config", "Semilla", "Inicio", "Fin", "Código", "Memoria (MB)"]
    rows = [
        [
            run[0],
            run[1] or "N/A",
            run[2] if run[2] is not None else "N/A",
            run[3].split(".")[0] if run[3] else "N/A",  # sin milisegundos
            run[4].split(".")[0] if run[4] else "N/A",
            run[5] if run[5] is not None else "N/A",
            run[6] if run[6] is not None else "N/A",
        ]
        for run in runs
    ]
    return format_table(headers, rows)
