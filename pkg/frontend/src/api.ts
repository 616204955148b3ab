// Read/control client over the server's JSON endpoints. Session cookie
// rides along automatically (same origin via the serving proxy).

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function request<T>(method: string, path: string, body?: unknown): Promise<T> {
  const resp = await fetch(path, {
    method,
    headers: body !== undefined ? { 'Content-Type': 'application/json' } : undefined,
    body: body !== undefined ? JSON.stringify(body) : undefined,
  });
  const doc = await resp.json().catch(() => ({}));
  if (!resp.ok) {
    throw new ApiError(resp.status, (doc as { error?: string }).error ?? `http ${resp.status}`);
  }
  return doc as T;
}

export const api = {
  login: (username: string, secret: string) =>
    request<{ username: string }>('POST', '/api/login', { username, secret }),
  whoami: () => request<{ username: string }>('GET', '/api/whoami'),
  datasets: () => request<{ datasets: import('./model.js').DatasetRow[] }>('GET', '/api/datasets'),
  jobs: (dataset: number) =>
    request<{ jobs: import('./model.js').JobRow[] }>('GET', `/api/datasets/${dataset}/jobs`),
  job: (dataset: number, index: number) =>
    request<{ job: import('./model.js').JobRow | null }>('GET', `/api/jobs/${dataset}.${index}`),
  stats: (dataset: number) =>
    request<{ stats: Record<string, { count: number; sum: number; average: number; stddev: number }> }>(
      'GET',
      `/api/datasets/${dataset}/stats`,
    ),
  runs: (dataset: number) =>
    request<{ runs: import('./model.js').RunRow[] }>('GET', `/api/datasets/${dataset}/runs`),
  control: (doc: {
    scope: 'dataset' | 'job';
    action: string;
    dataset_id: number;
    job_index?: number;
    task_name?: string;
  }) => request<{ result: unknown }>('POST', '/api/control', doc),
};
