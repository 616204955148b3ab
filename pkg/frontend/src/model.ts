// View-model helpers: pure functions from API payloads to HTML strings,
// kept free of DOM access so they test in plain node.

export interface DatasetRow {
  dataset_id: number;
  description: string;
  category: string;
  alias: string | null;
  workflow: string;
  declared_jobs: number; // 0 marks an off-line (grown) dataset
  total_jobs: number;
  states: Record<string, number>;
}

export interface JobRow {
  dataset_id: number;
  job_index: number;
  state: string;
  retries: number;
  site: string | null;
  host: string | null;
  error: string | null;
  stats?: Record<string, number>;
  tasks?: { task_name: string; state: string; retries: number; site: string | null }[];
}

export interface RunRow {
  run_number: number | null;
  date: string | null;
  path: string;
  job_index: number;
  size: number;
  md5: string | null;
}

export const STATE_ORDER = [
  'WAITING', 'QUEUEING', 'QUEUED', 'PROCESSING', 'COPYING',
  'OK', 'ERROR', 'RESET', 'CLEANING', 'SUSPENDED', 'FAILED',
];

const STATE_HUES: Record<string, string> = {
  OK: '#2e9e44',
  ERROR: '#d64545',
  FAILED: '#8a1d1d',
  PROCESSING: '#3178c6',
  COPYING: '#6fa8dc',
  QUEUED: '#b8860b',
  QUEUEING: '#d7a740',
  WAITING: '#9aa0a6',
  RESET: '#a469bd',
  CLEANING: '#7d5ba6',
  SUSPENDED: '#5f6b7a',
};

export function esc(text: unknown): string {
  return String(text ?? '')
    .replaceAll('&', '&amp;')
    .replaceAll('<', '&lt;')
    .replaceAll('>', '&gt;')
    .replaceAll('"', '&quot;');
}

export function completionRate(ds: DatasetRow): number {
  if (ds.total_jobs === 0) return 0;
  return (ds.states['OK'] ?? 0) / ds.total_jobs;
}

export function errorCount(ds: DatasetRow): number {
  return (ds.states['ERROR'] ?? 0) + (ds.states['FAILED'] ?? 0);
}

/** Stacked per-state bar; widths proportional to job counts. */
export function stateBar(ds: DatasetRow, width = 240): string {
  if (ds.total_jobs === 0) return '<svg class="bar" width="0" height="12"></svg>';
  const parts: string[] = [];
  let x = 0;
  for (const state of STATE_ORDER) {
    const n = ds.states[state] ?? 0;
    if (!n) continue;
    const w = (n / ds.total_jobs) * width;
    parts.push(
      `<rect x="${x.toFixed(1)}" y="0" width="${w.toFixed(1)}" height="12" fill="${STATE_HUES[state] ?? '#ccc'}"><title>${state}: ${n}</title></rect>`,
    );
    x += w;
  }
  return `<svg class="bar" width="${width}" height="12" role="img">${parts.join('')}</svg>`;
}

export function renderDatasetTable(rows: DatasetRow[]): string {
  if (!rows.length) return '<p class="empty">No datasets.</p>';
  const body = rows
    .map((ds) => {
      const pct = (completionRate(ds) * 100).toFixed(1);
      const states = STATE_ORDER.filter((s) => ds.states[s])
        .map((s) => `${s}:${ds.states[s]}`)
        .join(' ');
      return `<tr data-dataset="${ds.dataset_id}">
<td><a href="#dataset/${ds.dataset_id}">${ds.dataset_id}</a></td>
<td>${esc(ds.alias ?? '')}</td>
<td>${esc(ds.category)}</td>
<td>${ds.total_jobs}</td>
<td>${stateBar(ds)}<span class="pct">${pct}%</span></td>
<td class="${errorCount(ds) ? 'errors' : ''}">${errorCount(ds)}</td>
<td>${esc(states)}</td>
</tr>`;
    })
    .join('\n');
  return `<table><thead><tr>
<th>dataset</th><th>alias</th><th>category</th><th>jobs</th>
<th>completion</th><th>errors</th><th>states</th>
</tr></thead><tbody>${body}</tbody></table>`;
}

export function renderJobTable(rows: JobRow[]): string {
  if (!rows.length) return '<p class="empty">No jobs.</p>';
  const body = rows
    .map(
      (j) => `<tr data-job="${j.dataset_id}.${j.job_index}">
<td><a href="#job/${j.dataset_id}.${j.job_index}">${j.job_index}</a></td>
<td class="state state-${j.state}">${j.state}</td>
<td>${j.retries}</td>
<td>${esc(j.site ?? '')}</td>
<td>${esc(j.host ?? '')}</td>
<td class="errtext">${esc(j.error ?? '')}</td>
</tr>`,
    )
    .join('\n');
  return `<table><thead><tr>
<th>job</th><th>state</th><th>retries</th><th>site</th><th>host</th><th>error</th>
</tr></thead><tbody>${body}</tbody></table>`;
}

export function renderStats(stats: Record<string, { count: number; sum: number; average: number; stddev: number }>): string {
  const names = Object.keys(stats).sort();
  if (!names.length) return '<p class="empty">No statistics reported yet.</p>';
  const body = names
    .map((name) => {
      const s = stats[name];
      return `<tr><td>${esc(name)}</td><td>${s.count}</td><td>${s.sum.toPrecision(8)}</td><td>${s.average.toPrecision(8)}</td><td>${s.stddev.toPrecision(8)}</td></tr>`;
    })
    .join('\n');
  return `<table><thead><tr><th>statistic</th><th>count</th><th>sum</th><th>average</th><th>stddev</th></tr></thead><tbody>${body}</tbody></table>`;
}

/** Calendar view (off-line datasets): runs grouped by date. */
export function groupRunsByDate(runs: RunRow[]): Map<string, RunRow[]> {
  const out = new Map<string, RunRow[]>();
  for (const run of runs) {
    const key = run.date ?? 'undated';
    if (!out.has(key)) out.set(key, []);
    out.get(key)!.push(run);
  }
  return new Map([...out.entries()].sort((a, b) => a[0].localeCompare(b[0])));
}

export function renderCalendar(runs: RunRow[], jobStates: Map<number, string>): string {
  if (!runs.length) return '<p class="empty">No run records (not an off-line dataset?).</p>';
  const groups = groupRunsByDate(runs);
  const cells: string[] = [];
  for (const [date, dayRuns] of groups) {
    const states = dayRuns.map((r) => jobStates.get(r.job_index) ?? 'WAITING');
    const allOk = states.every((s) => s === 'OK');
    const anyBad = states.some((s) => s === 'ERROR' || s === 'FAILED');
    const klass = allOk ? 'day-ok' : anyBad ? 'day-bad' : 'day-busy';
    const runNumbers = [...new Set(dayRuns.map((r) => r.run_number))].join(', ');
    cells.push(
      `<div class="day ${klass}"><div class="date">${esc(date)}</div><div class="runs">runs ${esc(runNumbers)}</div><div class="files">${dayRuns.length} file(s)</div></div>`,
    );
  }
  return `<div class="calendar">${cells.join('\n')}</div>`;
}
