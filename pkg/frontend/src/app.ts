// Single-page operator console: login, polled views, control buttons.

import { api, ApiError } from './api.js';
import { actionsFor } from './actions.js';
import {
  DatasetRow,
  JobRow,
  esc,
  renderCalendar,
  renderDatasetTable,
  renderJobTable,
  renderStats,
} from './model.js';

const POLL_MS = Number(new URLSearchParams(location.search).get('poll') ?? '5000');

const root = document.getElementById('app')!;
let pollTimer: number | undefined;

function flash(message: string, bad = true) {
  const box = document.getElementById('flash');
  if (!box) return;
  box.textContent = message;
  box.className = bad ? 'flash bad' : 'flash ok';
  if (message) setTimeout(() => (box.textContent = ''), 6000);
}

function controlButtons(scope: 'dataset' | 'job', payload: Record<string, unknown>): string {
  return actionsFor(scope)
    .map(
      (a) =>
        `<button class="ctl" data-id="${a.id}" data-scope="${a.scope}" data-action="${a.action}" data-payload='${esc(JSON.stringify(payload))}'>${a.label} ${scope}</button>`,
    )
    .join(' ');
}

function wireControls(container: HTMLElement, refresh: () => void) {
  for (const btn of container.querySelectorAll<HTMLButtonElement>('button.ctl')) {
    btn.onclick = async () => {
      const payload = JSON.parse(btn.dataset.payload!) as Record<string, unknown>;
      try {
        await api.control({
          scope: btn.dataset.scope as 'dataset' | 'job',
          action: btn.dataset.action!,
          ...(payload as { dataset_id: number; job_index?: number }),
        });
        flash(`${btn.dataset.action} accepted`, false);
        refresh();
      } catch (err) {
        if (err instanceof ApiError && err.status === 401) return showLogin();
        flash(String(err instanceof Error ? err.message : err));
      }
    };
  }
}

function schedule(view: () => Promise<void>) {
  if (pollTimer !== undefined) clearInterval(pollTimer);
  pollTimer = setInterval(() => {
    view().catch((err) => {
      if (err instanceof ApiError && err.status === 401) showLogin();
    });
  }, POLL_MS) as unknown as number;
}

async function showGeneral() {
  const { datasets } = await api.datasets();
  root.innerHTML = `<h2>Datasets</h2>${renderDatasetTable(datasets)}`;
  schedule(showGeneral);
}

async function showDataset(datasetId: number) {
  const [{ jobs }, { stats }, { datasets }] = await Promise.all([
    api.jobs(datasetId),
    api.stats(datasetId),
    api.datasets(),
  ]);
  const ds = datasets.find((d: DatasetRow) => d.dataset_id === datasetId);
  const offline = ds !== undefined && ds.declared_jobs === 0;
  root.innerHTML = `
<h2><a href="#">Datasets</a> / ${datasetId} ${esc(ds?.alias ?? '')}</h2>
<div class="controls">${controlButtons('dataset', { dataset_id: datasetId })}</div>
${ds ? renderDatasetTable([ds]) : ''}
<h3>Jobs</h3>${renderJobTable(jobs)}
<h3>Statistics</h3>${renderStats(stats)}
${offline ? `<h3>Runs</h3><div id="runs">loading…</div>` : ''}`;
  wireControls(root, () => void showDataset(datasetId));
  if (offline) {
    const { runs } = await api.runs(datasetId);
    const jobStates = new Map<number, string>(jobs.map((j: JobRow) => [j.job_index, j.state]));
    const el = document.getElementById('runs');
    if (el) el.innerHTML = renderCalendar(runs, jobStates);
  }
  schedule(() => showDataset(datasetId));
}

async function showJob(datasetId: number, jobIndex: number) {
  const { job } = await api.job(datasetId, jobIndex);
  if (!job) {
    root.innerHTML = `<h2>No such job ${datasetId}.${jobIndex}</h2>`;
    return;
  }
  const tasks = job.tasks?.length
    ? `<h3>Tasks</h3><table><thead><tr><th>task</th><th>state</th><th>retries</th><th>site</th></tr></thead><tbody>${job.tasks
        .map(
          (t) =>
            `<tr><td>${esc(t.task_name)}</td><td class="state state-${t.state}">${t.state}</td><td>${t.retries}</td><td>${esc(t.site ?? '')}</td></tr>`,
        )
        .join('')}</tbody></table>`
    : '';
  root.innerHTML = `
<h2><a href="#">Datasets</a> / <a href="#dataset/${datasetId}">${datasetId}</a> / job ${jobIndex}</h2>
<div class="controls">${controlButtons('job', { dataset_id: datasetId, job_index: jobIndex })}</div>
<table><tbody>
<tr><th>state</th><td class="state state-${job.state}">${job.state}</td></tr>
<tr><th>retries</th><td>${job.retries}</td></tr>
<tr><th>site</th><td>${esc(job.site ?? '')}</td></tr>
<tr><th>host</th><td>${esc(job.host ?? '')}</td></tr>
<tr><th>error</th><td class="errtext">${esc(job.error ?? '')}</td></tr>
</tbody></table>
${tasks}
<h3>Statistics</h3>${renderStats(
    Object.fromEntries(
      Object.entries(job.stats ?? {}).map(([k, v]) => [k, { count: 1, sum: v, average: v, stddev: 0 }]),
    ),
  )}`;
  wireControls(root, () => void showJob(datasetId, jobIndex));
  schedule(() => showJob(datasetId, jobIndex));
}

function showLogin() {
  if (pollTimer !== undefined) clearInterval(pollTimer);
  root.innerHTML = `
<h2>Sign in</h2>
<form id="login">
  <label>user <input name="username" autocomplete="username"></label>
  <label>secret <input name="secret" type="password" autocomplete="current-password"></label>
  <button type="submit">Sign in</button>
</form>`;
  const form = document.getElementById('login') as HTMLFormElement;
  form.onsubmit = async (ev) => {
    ev.preventDefault();
    const data = new FormData(form);
    try {
      await api.login(String(data.get('username')), String(data.get('secret')));
      flash('signed in', false);
      route();
    } catch (err) {
      flash(err instanceof Error ? err.message : String(err));
    }
  };
}

function route() {
  const hash = location.hash.replace(/^#/, '');
  const dataset = hash.match(/^dataset\/(\d+)$/);
  const job = hash.match(/^job\/(\d+)\.(\d+)$/);
  const view = job
    ? () => showJob(Number(job[1]), Number(job[2]))
    : dataset
      ? () => showDataset(Number(dataset[1]))
      : showGeneral;
  view().catch((err) => {
    if (err instanceof ApiError && err.status === 401) showLogin();
    else flash(String(err instanceof Error ? err.message : err));
  });
}

window.addEventListener('hashchange', route);
api
  .whoami()
  .then(route)
  .catch(() => showLogin());
